import pytest
from app.exceptions import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    ImageIOError,
    MetricError,
    SRError,
    TrainingError,
    ValidationError,
)

# Test cases for the SRError hierarchy

def test_sr_error_is_base_exception():
    with pytest.raises(SRError) as exc_info:
        raise SRError("Base framework error occurred")
    assert str(exc_info.value) == "Base framework error occurred"

@pytest.mark.parametrize("error_class", [
    ValidationError, ImageIOError, ConfigurationError, CheckpointError, MetricError,
])
def test_plain_errors_are_sr_errors(error_class):
    with pytest.raises(SRError) as exc_info:
        raise error_class("Something failed")
    assert isinstance(exc_info.value, error_class)
    assert str(exc_info.value) == "Something failed"

def test_validation_error_specific_exception():
    with pytest.raises(ValidationError) as exc_info:
        raise ValidationError("Validation error")
    assert str(exc_info.value) == "Validation error"

def test_training_error_carries_term_and_step():
    with pytest.raises(SRError) as exc_info:
        raise TrainingError("Loss term 'qa' is not finite", term="qa", step=12)
    assert isinstance(exc_info.value, TrainingError)
    assert exc_info.value.term == "qa"
    assert exc_info.value.step == 12

def test_training_error_defaults():
    error = TrainingError("boom")
    assert error.term is None
    assert error.step is None

def test_dataset_error_carries_rows():
    error = DatasetError("Malformed rows", rows=(2, 5))
    assert isinstance(error, SRError)
    assert error.rows == [2, 5]

def test_dataset_error_rows_default_empty():
    assert DatasetError("Empty dataset").rows == []

def test_catching_base_error_catches_all():
    for error in (ValidationError("v"), ConfigurationError("c"), TrainingError("t"), DatasetError("d")):
        try:
            raise error
        except SRError as caught:
            assert caught is error
