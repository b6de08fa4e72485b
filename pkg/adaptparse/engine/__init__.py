# 自动微分引擎
from adaptparse.engine.tensor import (  # noqa: F401
    OpRecord,
    OpTrace,
    Tensor,
    network_scope,
    no_grad,
    parameter,
    record_switches,
    trace_ops,
)
