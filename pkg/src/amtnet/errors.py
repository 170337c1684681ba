class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


class NonFiniteLoss(RuntimeError):
    """Raised when a training loss (or one of its inputs) stops being finite."""

    def __init__(self, node: str, value: float):
        super().__init__(f"non-finite value at {node!r}: {value}")
        self.node = node
        self.value = value
