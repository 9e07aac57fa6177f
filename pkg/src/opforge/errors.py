"""Exception types shared across the package.

Plain I/O failures are not wrapped: callers see the usual ``OSError``
family and the CLI maps those to its I/O exit code.
"""

from __future__ import annotations


class OpforgeError(Exception):
    """Base class for all data and usage errors raised by this package."""


# --- tokenizer -----------------------------------------------------------


class TokenizeError(OpforgeError):
    """A SMILES string cannot be segmented into tokens."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (position {position})")
        self.position = position


class UnknownCharacter(TokenizeError):
    pass


class UnterminatedBracket(TokenizeError):
    pass


class SpecialTokenPresent(OpforgeError):
    """Detokenize was handed a BOS/EOS/PAD token; callers strip those first."""


class EmptyCorpus(OpforgeError):
    pass


# --- parser --------------------------------------------------------------


class ParseError(OpforgeError):
    """A token stream does not describe a well-formed molecular graph."""


class EmptyInput(ParseError):
    pass


class UnmatchedRingBond(ParseError):
    def __init__(self, label: str, message: str | None = None) -> None:
        super().__init__(message or f"ring bond '{label}' never closed")
        self.label = label


class UnmatchedParenthesis(ParseError):
    pass


class DanglingBond(ParseError):
    pass


class SingleFragmentOnly(ParseError):
    """Dot-separated multi-fragment inputs are rejected; candidates must be one molecule."""


class PatternTooLarge(OpforgeError):
    pass


# --- model ---------------------------------------------------------------


class IdOutOfRange(OpforgeError):
    pass


class ShapeMismatch(OpforgeError):
    pass


class DegenerateDistribution(OpforgeError):
    pass


class CheckpointError(OpforgeError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


# --- property tables -----------------------------------------------------


class TableError(OpforgeError):
    pass


class UnknownElementWeight(TableError):
    pass


# --- pipeline ------------------------------------------------------------


class UnknownFormat(OpforgeError):
    pass


class SeedError(OpforgeError):
    pass


class SeedUntokenizable(SeedError):
    pass


class SeedMissingRequiredElements(SeedError):
    """Seed fragments must carry P, F, O and C element tokens."""


# --- external-report adapters --------------------------------------------


class MalformedTable(OpforgeError):
    pass


class NoResultRows(OpforgeError):
    pass


class MissingMappedColumn(OpforgeError):
    def __init__(self, field: str, column: str) -> None:
        super().__init__(f"column '{column}' (mapped to field '{field}') not in header")
        self.field = field
        self.column = column


class NoPlottableData(OpforgeError):
    pass
