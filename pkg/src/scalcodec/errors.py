"""Exception taxonomy shared by the whole package.

ContractError marks a caller bug (bad shapes, missing gradients, invalid
arguments). FormatError marks bad data on disk or on the wire; StreamError
narrows that to the coded bitstream itself. DivergenceError aborts training
when a tensor goes non-finite.
"""


class ScalcodecError(Exception):
    pass


class ContractError(ScalcodecError):
    pass


class FormatError(ScalcodecError):
    pass


class StreamError(FormatError):
    pass


class DivergenceError(ScalcodecError):
    pass
