# -*- coding: utf-8 -*-
"""Errors raised by passform."""


class PassformError(Exception):
    """Base class for every error raised by the library."""


class ArgumentError(PassformError, ValueError):
    """An argument has the wrong shape, length or range."""


class ValidationError(PassformError):
    """Data (a manifest, a pair list, a label set) violates a precondition."""


class ConfigurationError(PassformError):
    """A configuration or parameter set cannot be used as requested."""


class NumericError(PassformError, ArithmeticError):
    """A loss term is NaN or infinite.

    Attributes:
        term (str): Name of the offending term.

    """

    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__('non-finite loss term {!r}: {!r}'.format(term, value))


class TrainingDivergedError(NumericError):
    """Training aborted on a non-finite loss.

    Attributes:
        step (int): Step at which the loss went non-finite.
        last_good (str): Path of the last checkpoint written, or `None`.

    """

    def __init__(self, term, value, step, last_good):
        super().__init__(term, value)
        self.step = step
        self.last_good = last_good
        self.args = ('step {}: non-finite {!r}; last good checkpoint: {}'
                     .format(step, term, last_good),)


class StarvedCellError(ValidationError):
    """The normal-set export could not fill one balance cell."""

    def __init__(self, cell, have, need):
        self.cell = cell
        self.have = have
        self.need = need
        super().__init__('balance cell skin_group={}, shape_group={} starved: '
                         '{} of {} images'.format(cell[0], cell[1], have, need))
