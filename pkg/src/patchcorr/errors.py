"""Exception hierarchy shared by all patchcorr modules.

Exit-code mapping used by the CLI: DataError -> 3, NumericError -> 4.
"""


class PatchCorrError(Exception):
    """Base class for all library errors."""

    code = "error"


class DataError(PatchCorrError):
    """Invalid or inconsistent input data."""

    code = "data_error"


class NumericError(PatchCorrError):
    """Numeric failure (singular matrices, empty solutions, ...)."""

    code = "numeric_error"


# -- grid ----------------------------------------------------------------

class InvalidSpec(DataError):
    code = "invalid_spec"


class IndexOutOfRange(DataError):
    code = "index_out_of_range"


# -- features ------------------------------------------------------------

class DecodeError(DataError):
    code = "decode_error"


class InsufficientSamples(DataError):
    code = "insufficient_samples"


class LengthMismatch(DataError):
    code = "length_mismatch"


# -- metric --------------------------------------------------------------

class SingularCovariance(NumericError):
    code = "singular_covariance"


class InsufficientPairs(DataError):
    code = "insufficient_pairs"


class EmptyTrainingSet(DataError):
    code = "empty_training_set"


# -- structure -----------------------------------------------------------

class NegativeEntry(DataError):
    code = "negative_entry"


class VersionMismatch(DataError):
    code = "version_mismatch"


class CorruptFile(DataError):
    code = "corrupt_file"


class GridMismatch(DataError):
    code = "grid_mismatch"


# -- assignment ----------------------------------------------------------

class InfeasibleRow(NumericError):
    code = "infeasible_row"

    def __init__(self, row=None, message=None):
        self.row = row
        super().__init__(message or f"row {row} has no feasible column")


class TooLarge(DataError):
    code = "too_large"


class ShapeMismatch(DataError):
    code = "shape_mismatch"


# -- matching / evaluation -----------------------------------------------

class NoCorrectMatch(DataError):
    code = "no_correct_match"


class EmptyRanks(DataError):
    code = "empty_ranks"


class DatasetTooSmall(DataError):
    code = "dataset_too_small"


# -- learning ------------------------------------------------------------

class PoolTooSmall(DataError):
    code = "pool_too_small"


class ZeroWeightSum(NumericError):
    code = "zero_weight_sum"


# -- multistructure ------------------------------------------------------

class TooFewImages(DataError):
    code = "too_few_images"


# -- synth ---------------------------------------------------------------

class ShiftOutOfBounds(DataError):
    code = "shift_out_of_bounds"


# -- cli / manifest ------------------------------------------------------

class ParseError(DataError):
    code = "parse_error"


class MissingFile(DataError):
    code = "missing_file"


class DuplicateId(DataError):
    code = "duplicate_id"
