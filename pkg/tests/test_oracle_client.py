"""Tests for the out-of-process oracle client against a scriptable stub
child that can misbehave in controlled ways."""


import numpy as np
import pytest

from helpers import write_stub_oracle
from subsel.errors import OracleError
from subsel.oracle_client import ExternalOracle
from subsel.rewards import SyntheticLandscape, SyntheticOracle



@pytest.fixture
def stub_cmd(tmp_path):
    def _cmd(mode="normal"):
        return write_stub_oracle(tmp_path, mode)

    return _cmd


def stub_reference_oracle():
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 0] = 1.0
    land = SyntheticLandscape(
        quality=np.array([1.0, 2.0, 0.5]), redundancy=w, lam=0.5, curvature=0.5)
    return SyntheticOracle(land, [0, 0, 1, 1, 2, 2])


def test_handshake_and_capability_translation(stub_cmd):
    with ExternalOracle(stub_cmd()) as oracle:
        assert oracle.capabilities == frozenset(
            {"eval_val_loss", "eval_train_loss", "eval_val_acc", "point_losses"})


def test_partial_capabilities(stub_cmd):
    oracle = ExternalOracle(stub_cmd("loss-only"))
    try:
        assert oracle.capabilities == frozenset({"eval_val_loss", "eval_train_loss"})
    finally:
        oracle._kill()


def test_matches_in_process_reference(stub_cmd):
    reference = stub_reference_oracle()
    with ExternalOracle(stub_cmd()) as oracle:
        for ids in ([], [0], [0, 1], [0, 2, 4], [1, 3, 5], list(range(6))):
            assert oracle.eval_loss(ids) == pytest.approx(
                reference.eval_loss(ids), rel=1e-12)
            assert oracle.eval_acc(ids) == pytest.approx(
                reference.eval_acc(ids), rel=1e-12)


def test_point_losses_shape(stub_cmd):
    with ExternalOracle(stub_cmd()) as oracle:
        losses = oracle.point_losses()
    assert len(losses) == 6
    assert all(l > 0 for l in losses)


def test_request_ids_dedupe_and_sort(stub_cmd):
    with ExternalOracle(stub_cmd()) as oracle:
        a = oracle.eval_loss([3, 1, 1, 3, 0])
        b = oracle.eval_loss([0, 1, 3])
        assert a == b


def test_call_count_tracks_requests(stub_cmd):
    with ExternalOracle(stub_cmd()) as oracle:
        base = oracle.call_count  # hello already happened
        oracle.eval_loss([0])
        oracle.eval_acc([0])
        assert oracle.call_count == base + 2


def test_string_command_is_split(stub_cmd):
    cmd = " ".join(stub_cmd())
    with ExternalOracle(cmd) as oracle:
        assert oracle.eval_loss([]) > 0


def test_clean_shutdown_exits_zero(stub_cmd):
    oracle = ExternalOracle(stub_cmd())
    oracle.eval_loss([0])
    oracle.close()  # would raise on nonzero exit
    assert oracle._proc.returncode == 0


def test_dirty_exit_surfaces_as_error(stub_cmd):
    oracle = ExternalOracle(stub_cmd("dirty-exit"))
    oracle.eval_loss([0])
    with pytest.raises(OracleError, match="exited with 3"):
        oracle.close()


def test_timeout_mentions_diagnostics(stub_cmd):
    oracle = ExternalOracle(stub_cmd("slow"), timeout=0.3)
    try:
        with pytest.raises(OracleError, match="did not answer"):
            oracle.eval_loss([0])
    finally:
        oracle._kill()


def test_malformed_reply_rejected(stub_cmd):
    oracle = ExternalOracle(stub_cmd("malformed"))
    try:
        with pytest.raises(OracleError, match="malformed"):
            oracle.eval_loss([0])
    finally:
        oracle._kill()


def test_mismatched_id_rejected(stub_cmd):
    oracle = ExternalOracle(stub_cmd("bad-id"))
    try:
        with pytest.raises(OracleError, match="does not match"):
            oracle.eval_loss([0])
    finally:
        oracle._kill()


def test_error_response_carries_message(stub_cmd):
    oracle = ExternalOracle(stub_cmd("error-op"))
    try:
        with pytest.raises(OracleError, match="subset rejected"):
            oracle.eval_loss([0])
    finally:
        oracle._kill()


def test_child_death_includes_stderr_tail(stub_cmd):
    oracle = ExternalOracle(stub_cmd("crash"))
    try:
        with pytest.raises(OracleError, match="giving up on purpose"):
            oracle.eval_loss([0])
    finally:
        oracle._kill()


def test_wrong_protocol_version_rejected(stub_cmd):
    with pytest.raises(OracleError, match="protocol"):
        ExternalOracle(stub_cmd("bad-protocol"))


def test_unlaunchable_command_rejected(tmp_path):
    with pytest.raises(OracleError, match="failed to launch"):
        ExternalOracle([str(tmp_path / "no_such_binary")])
