"""Exception hierarchy.

Everything raised on bad user input derives from ``InputError`` so callers
(and the command line) can tell data problems apart from bugs.
"""


class CardiofuseError(Exception):
    pass


class InputError(CardiofuseError, ValueError):
    pass


# signal_io
class MalformedHeader(InputError):
    pass


class UnsupportedFormat(InputError):
    pass


class LengthMismatch(InputError):
    pass


class ChannelOutOfRange(InputError, IndexError):
    pass


class NotRiff(InputError):
    pass


class UnsupportedEncoding(InputError):
    pass


class DuplicateRecord(InputError):
    pass


class BadLabelValue(InputError):
    pass


class MissingModality(InputError):
    pass


class MissingLabel(InputError, KeyError):
    pass


# preprocess
class AllMissing(InputError):
    pass


class UpsamplingRequested(InputError):
    pass


class RecordingTooShort(InputError):
    pass


class BadCache(InputError):
    pass


# nn / model
class OddWidth(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class GraphNotRecorded(CardiofuseError, RuntimeError):
    pass


class InvalidConfig(InputError):
    pass


class BadMagic(InputError):
    pass


class ConfigHashMismatch(InputError):
    pass


class TruncatedStream(InputError):
    pass


# train
class SingleClass(InputError):
    pass


class TooFewRecordings(InputError):
    pass


# quant
class NoData(InputError):
    pass


class NotCalibrated(CardiofuseError, RuntimeError):
    pass


# stream / cli
class BadProfile(InputError):
    pass
