import json
from unittest.mock import Mock, patch

import pytest
from app.metrics import ImageMetrics, MetricsReport
from app.sr_config import TrainConfig
from app.step_record import StepRecord
from app.trainer import Trainer
from app.training_observers import CheckpointObserver, LoggingObserver, ValidationObserver

# Sample step record
record_mock = Mock(spec=StepRecord)
record_mock.step = 9
record_mock.to_log_line.return_value = "step=9 loss_g=1"


def _trainer_mock(tmp_path, **config_values):
    trainer_mock = Mock(spec=Trainer)
    trainer_mock.config = Mock(spec=TrainConfig)
    for name, value in config_values.items():
        setattr(trainer_mock.config, name, value)
    trainer_mock.out_dir = tmp_path
    return trainer_mock

# Test cases for LoggingObserver

@patch('logging.info')
def test_logging_observer_writes_line(logging_info_mock, tmp_path):
    observer = LoggingObserver(tmp_path / "logs" / "train_log.txt")
    observer.update(record_mock)
    assert (tmp_path / "logs" / "train_log.txt").read_text(encoding="utf-8") == "step=9 loss_g=1\n"
    logging_info_mock.assert_called_once_with("step=9 loss_g=1")

@patch('logging.info')
def test_logging_observer_mirrors_every_nth_step(logging_info_mock, tmp_path):
    observer = LoggingObserver(tmp_path / "train_log.txt", log_every=5)
    observer.update(record_mock)
    logging_info_mock.assert_not_called()
    assert len((tmp_path / "train_log.txt").read_text(encoding="utf-8").splitlines()) == 1

def test_logging_observer_no_record(tmp_path):
    observer = LoggingObserver(tmp_path / "train_log.txt")
    with pytest.raises(AttributeError):
        observer.update(None)

# Test cases for CheckpointObserver

def test_checkpoint_observer_triggers_save(tmp_path):
    trainer_mock = _trainer_mock(tmp_path, checkpoint_every=5)
    observer = CheckpointObserver(trainer_mock)
    observer.update(record_mock)
    trainer_mock.save_checkpoint.assert_called_once()

@patch('logging.info')
def test_checkpoint_observer_logs_save(logging_info_mock, tmp_path):
    observer = CheckpointObserver(_trainer_mock(tmp_path, checkpoint_every=10))
    observer.update(record_mock)
    logging_info_mock.assert_called_once_with("Checkpoint saved after step 9")

def test_checkpoint_observer_skips_off_cadence(tmp_path):
    trainer_mock = _trainer_mock(tmp_path, checkpoint_every=4)
    CheckpointObserver(trainer_mock).update(record_mock)
    trainer_mock.save_checkpoint.assert_not_called()

def test_checkpoint_observer_disabled(tmp_path):
    trainer_mock = _trainer_mock(tmp_path, checkpoint_every=0)
    CheckpointObserver(trainer_mock).update(record_mock)
    trainer_mock.save_checkpoint.assert_not_called()

def test_checkpoint_observer_invalid_trainer():
    with pytest.raises(TypeError):
        CheckpointObserver(None)

def test_checkpoint_observer_no_record(tmp_path):
    observer = CheckpointObserver(_trainer_mock(tmp_path, checkpoint_every=1))
    with pytest.raises(AttributeError):
        observer.update(None)

# Test cases for ValidationObserver

def test_validation_observer_appends_jsonl(tmp_path):
    trainer_mock = _trainer_mock(tmp_path, validate_every=5)
    trainer_mock.validate.return_value = MetricsReport(records=[ImageMetrics("img0", float("inf"), 1.0)])
    observer = ValidationObserver(trainer_mock)
    observer.update(record_mock)
    observer.update(record_mock)
    lines = (tmp_path / "validation.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0]) == {"step": 9, "psnr": "inf", "ssim": 1.0, "lpips": None}
    assert len(observer.reports) == 2

def test_validation_observer_off_cadence(tmp_path):
    trainer_mock = _trainer_mock(tmp_path, validate_every=3)
    ValidationObserver(trainer_mock).update(record_mock)
    trainer_mock.validate.assert_not_called()

def test_validation_observer_without_validation_set(tmp_path):
    trainer_mock = _trainer_mock(tmp_path, validate_every=1)
    trainer_mock.validate.return_value = None
    observer = ValidationObserver(trainer_mock)
    observer.update(record_mock)
    assert observer.reports == []
    assert not (tmp_path / "validation.jsonl").exists()

def test_validation_observer_invalid_trainer():
    with pytest.raises(TypeError):
        ValidationObserver(object())
