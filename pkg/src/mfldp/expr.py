"""Rate expression mini-language.

Rates are written as small arithmetic expressions over the occupation
vector, e.g. ``0.1 + 2*mu[1]*mu[1]`` or ``a*exp(-k*(mu[0] + 0.5*mu[1]))``.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*
    term    := power (('*' | '/') power)*
    power   := unary (('^' | '**') exponent)?
    unary   := ('-' | '+') unary | atom
    atom    := NUMBER | 'mu' '[' INT ']' | FUNC '(' args ')' | '(' expr ')'
    exponent:= ('-' | '+')? NUMBER | '(' ('-' | '+')? NUMBER ')'

Unary minus binds tighter than power, so ``-x^2`` is ``(-x)^2``.  Exponents
must be numeric constants.  Besides the tree-walking evaluator, expressions
compile to a flat postfix program that the numeric kernels interpret.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np


class RateExprSyntaxError(ValueError):
    """Raised on malformed expression text; ``offset`` is the byte offset."""

    def __init__(self, message: str, offset: int, text: str = ""):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset
        self.text = text


class RateDomainError(ArithmeticError):
    """Expression evaluated outside its domain (log of nonpositive, 0/0...)."""


# postfix opcodes shared with the kernels
OP_CONST, OP_VAR, OP_ADD, OP_SUB, OP_MUL, OP_DIV = 0, 1, 2, 3, 4, 5
OP_NEG, OP_EXP, OP_LOG, OP_MIN, OP_MAX, OP_POW = 6, 7, 8, 9, 10, 11

_BINARY = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV}
_FUNCS = {"exp": 1, "log": 1, "min": 2, "max": 2}


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: float


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Num | Var | Neg | BinOp | Pow | Call


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()\[\],]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            offset = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise RateExprSyntaxError(f"unexpected character {text[offset]!r}", offset, text)
        kind = m.lastgroup
        if kind is None:
            break
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.next()
        if val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise RateExprSyntaxError(f"expected {value!r}, found {found}", off, self.text)

    def fail(self, msg: str):
        raise RateExprSyntaxError(msg, self.peek()[2], self.text)

    def parse(self) -> Node:
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.power()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            node = BinOp(op, node, self.power())
        return node

    def power(self) -> Node:
        base = self.unary()
        if self.peek()[1] in ("^", "**"):
            self.next()
            base = Pow(base, self.exponent())
            if self.peek()[1] in ("^", "**"):
                self.fail("chained powers need parentheses")
        return base

    def exponent(self) -> float:
        paren = self.peek()[1] == "("
        if paren:
            self.next()
        sign = 1.0
        while self.peek()[1] in ("+", "-"):
            if self.next()[1] == "-":
                sign = -sign
        kind, val, off = self.next()
        if kind != "num":
            raise RateExprSyntaxError("exponent must be a numeric constant", off, self.text)
        if paren:
            self.expect(")")
        return sign * float(val)

    def unary(self) -> Node:
        if self.peek()[1] == "-":
            self.next()
            return Neg(self.unary())
        if self.peek()[1] == "+":
            self.next()
            return self.unary()
        return self.atom()

    def atom(self) -> Node:
        kind, val, off = self.next()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if val == "mu":
                self.expect("[")
                k_kind, k_val, k_off = self.next()
                if k_kind != "num" or not k_val.isdigit():
                    raise RateExprSyntaxError("state index must be a nonnegative integer", k_off, self.text)
                self.expect("]")
                return Var(int(k_val))
            if val in _FUNCS:
                self.expect("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != _FUNCS[val]:
                    raise RateExprSyntaxError(
                        f"{val}() takes {_FUNCS[val]} argument(s), got {len(args)}", off, self.text
                    )
                return Call(val, tuple(args))
            raise RateExprSyntaxError(f"unknown name {val!r}", off, self.text)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise RateExprSyntaxError(f"unexpected {found}", off, self.text)


def parse_rate_expr(text: str) -> Node:
    """Parse expression text into an immutable AST."""
    if not text or not text.strip():
        raise RateExprSyntaxError("empty expression", 0, text)
    return _Parser(text).parse()


def _fmt_num(x: float) -> str:
    return repr(float(x))


def to_text(node: Node) -> str:
    """Print an AST back to text; fully parenthesized so parsing is exact."""
    if isinstance(node, Num):
        s = _fmt_num(node.value)
        return f"({s})" if node.value < 0 or s.startswith("-") else s
    if isinstance(node, Var):
        return f"mu[{node.index}]"
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    if isinstance(node, Pow):
        return f"({to_text(node.base)}^({_fmt_num(node.exponent)}))"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_text(a) for a in node.args)})"
    raise TypeError(node)


def max_index(node: Node) -> int:
    """Largest ``mu[k]`` index referenced, or -1."""
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Num):
        return -1
    if isinstance(node, Neg):
        return max_index(node.arg)
    if isinstance(node, BinOp):
        return max(max_index(node.left), max_index(node.right))
    if isinstance(node, Pow):
        return max_index(node.base)
    return max((max_index(a) for a in node.args), default=-1)


def evaluate(node: Node, mu) -> float:
    """Evaluate at a single point with domain checking."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(mu[node.index])
    if isinstance(node, Neg):
        return -evaluate(node.arg, mu)
    if isinstance(node, BinOp):
        a = evaluate(node.left, mu)
        b = evaluate(node.right, mu)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if b == 0.0:
            raise RateDomainError(f"division by zero in {to_text(node)}")
        return a / b
    if isinstance(node, Pow):
        a = evaluate(node.base, mu)
        e = node.exponent
        if a < 0 and not float(e).is_integer():
            raise RateDomainError(f"negative base to fractional power in {to_text(node)}")
        if a == 0 and e < 0:
            raise RateDomainError(f"zero to negative power in {to_text(node)}")
        return a**e
    args = [evaluate(a, mu) for a in node.args]
    if node.func == "exp":
        try:
            return math.exp(args[0])
        except OverflowError as exc:
            raise RateDomainError(f"exp overflow in {to_text(node)}") from exc
    if node.func == "log":
        if args[0] <= 0:
            raise RateDomainError(f"log of nonpositive value {args[0]!r} in {to_text(node)}")
        return math.log(args[0])
    if node.func == "min":
        return min(args)
    return max(args)


def compile_postfix(node: Node) -> tuple[list[int], list[float], int]:
    """Flatten to (opcodes, operands, max stack depth).

    ``operands`` holds the constant for OP_CONST, the state index for OP_VAR
    and the exponent for OP_POW; unused slots are 0.
    """
    code: list[int] = []
    args: list[float] = []

    def emit(op, arg=0.0):
        code.append(op)
        args.append(float(arg))

    def walk(n):
        if isinstance(n, Num):
            emit(OP_CONST, n.value)
        elif isinstance(n, Var):
            emit(OP_VAR, n.index)
        elif isinstance(n, Neg):
            walk(n.arg)
            emit(OP_NEG)
        elif isinstance(n, BinOp):
            walk(n.left)
            walk(n.right)
            emit(_BINARY[n.op])
        elif isinstance(n, Pow):
            walk(n.base)
            emit(OP_POW, n.exponent)
        else:
            for a in n.args:
                walk(a)
            emit({"exp": OP_EXP, "log": OP_LOG, "min": OP_MIN, "max": OP_MAX}[n.func])

    walk(node)
    depth = 0
    peak = 0
    for op in code:
        if op in (OP_CONST, OP_VAR):
            depth += 1
        elif op in (OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_MIN, OP_MAX):
            depth -= 1
        peak = max(peak, depth)
    return code, args, peak


def eval_postfix_batch(code, args, mus: np.ndarray) -> np.ndarray:
    """Vectorized postfix evaluation over rows of ``mus`` (no domain checks)."""
    stack: list[np.ndarray] = []
    n = mus.shape[0]
    with np.errstate(all="ignore"):
        for op, a in zip(code, args):
            if op == OP_CONST:
                stack.append(np.full(n, a))
            elif op == OP_VAR:
                stack.append(mus[:, int(a)])
            elif op == OP_NEG:
                stack.append(-stack.pop())
            elif op == OP_EXP:
                stack.append(np.exp(stack.pop()))
            elif op == OP_LOG:
                stack.append(np.log(stack.pop()))
            elif op == OP_POW:
                stack.append(np.power(stack.pop(), a))
            else:
                b = stack.pop()
                x = stack.pop()
                if op == OP_ADD:
                    stack.append(x + b)
                elif op == OP_SUB:
                    stack.append(x - b)
                elif op == OP_MUL:
                    stack.append(x * b)
                elif op == OP_DIV:
                    stack.append(x / b)
                elif op == OP_MIN:
                    stack.append(np.minimum(x, b))
                else:
                    stack.append(np.maximum(x, b))
    return stack[-1]
