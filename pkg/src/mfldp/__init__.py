"""Mean-field jump processes: simulation, McKean-Vlasov dynamics and
large-deviation costs (action functional, quasipotential, stationary rate
function)."""

__version__ = "0.1.0"
