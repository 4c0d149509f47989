"""Client for out-of-process reward oracles.

Speaks the subsel-oracle protocol, version 1: newline-delimited UTF-8
JSON over the child's standard streams, one request in flight at a time,
responses matched to requests by id. Any transport problem (timeout,
malformed reply, dead child) surfaces as OracleError with a diagnostic
including the child's recent stderr.
"""

from __future__ import annotations

import collections
import json
import queue
import shlex
import subprocess
import threading
from typing import Dict, List, Optional, Sequence, Union

from .errors import OracleError
from .rewards import RewardOracle

PROTOCOL_VERSION = 1

_EOF = object()

_WIRE_TO_ABSTRACT = {
    "eval_loss": ("eval_val_loss", "eval_train_loss"),
    "eval_acc": ("eval_val_acc",),
    "point_losses": ("point_losses",),
}


class ExternalOracle(RewardOracle):
    """Blocking request/response handle to a spawned oracle process."""

    def __init__(self, command: Union[str, Sequence[str]], timeout: float = 60.0,
                 cwd: Optional[str] = None):
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 0
        self._stderr_tail: collections.deque = collections.deque(maxlen=50)
        self._responses: "queue.Queue" = queue.Queue()
        self.request_count = 0
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=cwd,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise OracleError(f"failed to launch oracle {self.command}: {exc}") from exc
        threading.Thread(target=self._read_stdout, daemon=True).start()
        threading.Thread(target=self._read_stderr, daemon=True).start()
        hello = self._request({"op": "hello"})
        if hello.get("protocol") != PROTOCOL_VERSION:
            self._kill()
            raise OracleError(
                f"oracle speaks protocol {hello.get('protocol')!r}, "
                f"need {PROTOCOL_VERSION}"
            )
        caps = set()
        for wire in hello.get("capabilities", []):
            caps.update(_WIRE_TO_ABSTRACT.get(wire, ()))
        self._capabilities = frozenset(caps)

    @property
    def capabilities(self) -> frozenset:
        return self._capabilities

    @property
    def call_count(self) -> int:
        return self.request_count

    def _read_stdout(self) -> None:
        try:
            for line in self._proc.stdout:
                self._responses.put(line)
        except ValueError:
            pass
        self._responses.put(_EOF)

    def _read_stderr(self) -> None:
        try:
            for line in self._proc.stderr:
                self._stderr_tail.append(line.rstrip("\n"))
        except ValueError:
            pass

    def _diagnostic(self) -> str:
        code = self._proc.poll()
        tail = "\n".join(self._stderr_tail) or "<no stderr>"
        status = "still running" if code is None else f"exit code {code}"
        return f"oracle {self.command} ({status}); recent stderr:\n{tail}"

    def _request(self, payload: Dict) -> Dict:
        with self._lock:
            if self._proc.poll() is not None:
                raise OracleError(f"oracle process is gone; {self._diagnostic()}")
            self._next_id += 1
            req_id = self._next_id
            payload = dict(payload, id=req_id)
            self.request_count += 1
            try:
                self._proc.stdin.write(json.dumps(payload) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise OracleError(f"write to oracle failed: {exc}; {self._diagnostic()}") from exc
            try:
                line = self._responses.get(timeout=self.timeout)
            except queue.Empty:
                raise OracleError(
                    f"oracle did not answer request {req_id} within "
                    f"{self.timeout}s; {self._diagnostic()}"
                ) from None
            if line is _EOF:
                self._proc.wait(timeout=5)
                raise OracleError(f"oracle closed its stream; {self._diagnostic()}")
            try:
                resp = json.loads(line)
            except json.JSONDecodeError as exc:
                raise OracleError(f"malformed oracle response {line!r}: {exc}") from exc
            if resp.get("id") != req_id:
                raise OracleError(
                    f"response id {resp.get('id')!r} does not match request {req_id}"
                )
            if "error" in resp:
                raise OracleError(f"oracle error: {resp['error']}")
            return resp

    @staticmethod
    def _clean_ids(train_ids: Sequence[int]) -> List[int]:
        return sorted(set(int(i) for i in train_ids))

    def eval_loss(self, train_ids: Sequence[int], split: str = "val") -> float:
        resp = self._request({
            "op": "eval_loss", "split": split, "train_ids": self._clean_ids(train_ids),
        })
        if "loss" not in resp:
            raise OracleError(f"eval_loss response lacks 'loss': {resp}")
        return float(resp["loss"])

    def eval_acc(self, train_ids: Sequence[int], split: str = "val") -> float:
        resp = self._request({
            "op": "eval_acc", "split": split, "train_ids": self._clean_ids(train_ids),
        })
        if "acc" not in resp:
            raise OracleError(f"eval_acc response lacks 'acc': {resp}")
        return float(resp["acc"])

    def point_losses(self) -> List[float]:
        resp = self._request({"op": "point_losses"})
        if "losses" not in resp:
            raise OracleError(f"point_losses response lacks 'losses': {resp}")
        return [float(x) for x in resp["losses"]]

    def _kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait(timeout=5)

    def close(self) -> None:
        """Request orderly shutdown; a nonzero child exit is a failure."""
        if self._proc.poll() is None:
            try:
                self._request({"op": "shutdown"})
            except OracleError:
                pass
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                self._kill()
                raise OracleError(f"oracle ignored shutdown; killed. {self._diagnostic()}")
        code = self._proc.returncode
        if code:
            raise OracleError(f"oracle exited with {code}; {self._diagnostic()}")

    def __enter__(self) -> "ExternalOracle":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self._kill()
