"""Exception types shared across the package."""


class SdPriorError(Exception):
    """Base class for all package errors."""


class ShapeError(SdPriorError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class ContractError(SdPriorError, ValueError):
    """A precondition of an operation was violated."""


class ParseError(SdPriorError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class DanglingReference(SdPriorError):
    def __init__(self, missing_ids):
        self.missing_ids = list(missing_ids)
        super().__init__("reference to absent element(s): " + ", ".join(str(i) for i in self.missing_ids))


class CapacityError(SdPriorError):
    """A frame holds more elements than the identifier dimension allows."""
