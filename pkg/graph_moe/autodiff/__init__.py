from graph_moe.autodiff.tape import (
    AdNode,
    AutodiffException,
    DimensionError,
    DomainError,
    NonFiniteError,
    Parameter,
    Tape,
    backward,
)
