"""Exception hierarchy.

The CLI maps these onto its exit-code contract: validation and
compatibility problems exit 2, everything else operational exits 1.
"""


class MoemergeError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(MoemergeError, ValueError):
    """A safetensors file or header violates the format contract."""


class UnsupportedDTypeError(FormatError):
    """A dtype string in a header is unknown or deliberately unsupported."""


class CompatibilityError(MoemergeError):
    """Parent checkpoints do not share an architecture."""


class RecipeError(MoemergeError, ValueError):
    """A recipe or config document is invalid."""


class MergeError(MoemergeError):
    """A planned merge cannot be executed (e.g. inputs changed on disk)."""


class FixtureError(MoemergeError, ValueError):
    """A fixture spec or perturbation selector is invalid."""
