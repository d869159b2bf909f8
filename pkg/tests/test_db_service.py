import pytest

from app.services.db_service import DatabaseService


@pytest.fixture
def db(tmp_path):
    return DatabaseService(f"sqlite:///{tmp_path / 'runs.db'}")


def test_run_lifecycle(db):
    record_id = db.create_run_record("upcycle", "/tmp/run", "checkpoint: a.ckpt\n")
    record = db.get_run(record_id)
    assert record.status == "pending"
    assert record.completed_at is None

    assert db.update_run_record(record_id, "completed", exit_code=0)
    record = db.get_run(record_id)
    assert record.status == "completed"
    assert record.exit_code == 0
    assert record.completed_at is not None


def test_failed_run_keeps_the_error(db):
    record_id = db.create_run_record("verify", "/tmp/run", "")
    db.update_run_record(record_id, "failed", exit_code=1, error_message="bad magic")
    assert db.get_run(record_id).error_message == "bad magic"


def test_update_of_missing_record(db):
    assert db.update_run_record(404, "completed") is False
    assert db.get_run(404) is None


def test_recent_runs_newest_first(db):
    ids = [db.create_run_record(cmd, "", "") for cmd in ("train", "upcycle", "train")]
    assert [run.id for run in db.recent_runs()] == ids[::-1]
    assert [run.id for run in db.recent_runs(subcommand="train")] == [ids[2], ids[0]]
    assert len(db.recent_runs(limit=1)) == 1
