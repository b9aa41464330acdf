import math

import pytest

from relso.exceptions import ValidationError
from relso.validators import FitnessValidator, SequenceValidator


def test_sequence_validator(alphabet):
    assert SequenceValidator(alphabet)(" ACDE ") == "ACDE"


def test_sequence_validator_unknown_symbol(alphabet):
    with pytest.raises(ValidationError, match="row 3: unknown symbol"):
        SequenceValidator(alphabet)("ACZ", row=3)


def test_sequence_validator_max_len(alphabet):
    validator = SequenceValidator(alphabet, max_len=3)
    assert validator("ACD") == "ACD"
    with pytest.raises(ValidationError, match="exceeds max_len"):
        validator("ACDE")


def test_sequence_validator_empty(alphabet):
    with pytest.raises(ValidationError, match="empty sequence"):
        SequenceValidator(alphabet)("")
    assert SequenceValidator(alphabet, allow_empty=True)("") == ""


def test_sequence_validator_not_text(alphabet):
    with pytest.raises(ValidationError):
        SequenceValidator(alphabet)(None)


def test_fitness_validator():
    assert FitnessValidator()("1.25") == 1.25
    assert FitnessValidator()(-3) == -3.0


@pytest.mark.parametrize("value", ["abc", "", None, "nan", "inf", math.inf])
def test_fitness_validator_invalid(value):
    with pytest.raises(ValidationError):
        FitnessValidator()(value, row=1)
