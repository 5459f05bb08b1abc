"""Built-in models.

``csma``
    Continuous-time caricature of a backoff MAC.  State ``i`` counts failed
    transmission attempts of the head-of-line packet.  A node in stage ``i``
    attempts at rate ``a_i = a0 * b**i``; an attempt succeeds with
    probability ``exp(-kappa * g(mu))`` where ``g(mu) = sum_k a_k mu[k]`` is
    the aggregate attempt intensity.  Success sends the node to 0, failure to
    ``i + 1``; from the last stage both outcomes lead to 0 (the packet is
    delivered or discarded), so that edge carries the full attempt rate.  A
    success from stage 0 is a null transition and is omitted.

    With geometric backoff (``b < 1``) and discard the equilibrium is
    unique: more collisions push mass to slower stages and lower the load.
    Multiple stable equilibria need positive feedback, which the family gets
    with persistent retries (``discard=False``) and attempt rates that grow
    with the stage (``b > 1``); ``CSMA_BISTABLE`` is such a regime.
``sis-bistable``
    Two-state contagion with quadratic feedback:
    ``0 -> 1`` at ``0.1 + 2 mu[1]^2`` and ``1 -> 0`` at ``0.1 + 2 mu[0]^2``.
    Stable states near 0.053 and 0.947 (in ``mu[1]``) with a saddle at 1/2.
``const2``
    Two independent states, ``0 -> 1`` at rate 1 and ``1 -> 0`` at rate 2.
    Stationary law is Binomial(N, 1/3) in the count of state 1.
"""

from __future__ import annotations

from .model import Model

# default stage-attempt parameters; the bistable set was located by scanning
# the stationary collision-probability fixed point over (r, a0, b) and is
# stored with its equilibrium catalog in the tests
CSMA_DEFAULTS = {"a0": 1.0, "b": 0.5, "kappa": 1.0}
CSMA_BISTABLE = {"a0": 0.5, "b": 3.0, "kappa": 1.0, "discard": False}


def _num(x: float) -> str:
    return repr(float(x))


def csma_model(r: int = 3, a0: float = 1.0, b: float = 0.5, kappa: float = 1.0,
               discard: bool = True) -> Model:
    """Backoff MAC model; see module docstring for the rate family.

    With ``discard=False`` a failure in the last stage keeps the node there
    (a null transition), so ``(r-1) -> 0`` carries only the success rate.
    """
    if r < 2:
        raise ValueError("csma needs at least two stages")
    if a0 <= 0 or b <= 0 or kappa <= 0:
        raise ValueError("csma parameters must be positive")
    attempt = [a0 * b**i for i in range(r)]
    load = " + ".join(f"{_num(a)}*mu[{k}]" for k, a in enumerate(attempt))
    success = f"exp(-{_num(kappa)}*({load}))"
    rates = {}
    for i, a in enumerate(attempt):
        if i == r - 1:
            rates[(i, 0)] = _num(a) if discard else f"{_num(a)}*{success}"
            continue
        rates[(i, i + 1)] = f"{_num(a)}*(1 - {success})"
        if i > 0:
            rates[(i, 0)] = f"{_num(a)}*{success}"
    return Model(r=r, rates=rates, name=f"csma{r}")


def sis_bistable_model() -> Model:
    return Model(
        r=2,
        rates={(0, 1): "0.1 + 2*mu[1]*mu[1]", (1, 0): "0.1 + 2*mu[0]*mu[0]"},
        name="sis-bistable",
    )


def const2_model() -> Model:
    return Model(r=2, rates={(0, 1): "1.0", (1, 0): "2.0"}, name="const2")


def rotational_model(eps: float = 0.1, beta: float = 5.0) -> Model:
    """Three-state cyclic model whose interior equilibrium is an unstable
    focus when ``beta > 9 * eps``; trajectories wind onto a limit cycle.
    """
    rates = {(i, (i + 1) % 3): f"{_num(eps)} + {_num(beta)}*mu[{(i + 1) % 3}]^2" for i in range(3)}
    return Model(r=3, rates=rates, name="rotational")


BUILTINS = {
    "csma": csma_model,
    "sis-bistable": sis_bistable_model,
    "const2": const2_model,
}


def builtin(name: str, **params) -> Model:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise KeyError(f"unknown built-in model {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**params)
