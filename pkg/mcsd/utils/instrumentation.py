"""Prometheus counters for forward cost and training activity."""
from typing import Optional
from prometheus_client import Counter, REGISTRY, write_to_textfile

forward_flops = Counter(
    "mcsd_forward_flops",
    "Multiply-add operations performed by network forward passes"
)

forward_passes = Counter(
    "mcsd_forward_passes",
    "Network forward passes",
    ["regime"]
)

train_steps = Counter(
    "mcsd_train_steps",
    "Optimizer steps taken"
)


def sample_value(name: str, labels: Optional[dict] = None) -> float:
    """Read a counter's current value from the default registry."""
    value = REGISTRY.get_sample_value(name, labels or {})
    return 0.0 if value is None else value


def dump_metrics(path: str) -> None:
    """Write the registry in text exposition format."""
    write_to_textfile(path, REGISTRY)
