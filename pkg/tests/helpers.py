"""Shared test utilities: tiny synthetic worlds, finite-difference
gradient oracles, and a scriptable out-of-process oracle stub."""

from __future__ import annotations

import sys
import textwrap

import numpy as np

from subsel.clustering import synthetic_cluster_model
from subsel.nets import DenseNet, param_vector, set_param_vector
from subsel.rewards import (
    RewardCache,
    RewardFunction,
    SyntheticLandscape,
    SyntheticOracle,
)


def make_world(k=6, seed=0, density=0.3, lam=0.5, curvature=0.5,
               points_per_cluster=4, dim=5, kind="loss_val"):
    """Small synthetic world: cluster model, landscape, oracle, reward."""
    model = synthetic_cluster_model(
        k=k, points_per_cluster=points_per_cluster, dim=dim, seed=seed)
    landscape = SyntheticLandscape.random(
        k, seed=seed, density=density, lam=lam, curvature=curvature)
    oracle = SyntheticOracle(landscape, model.assignment)
    reward_fn = RewardFunction(oracle=oracle, model=model, kind=kind,
                               cache=RewardCache())
    return model, landscape, oracle, reward_fn


def fd_gradient(fn, x0, h=1e-4):
    """Central-difference gradient of a scalar function at x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return grad


def relu_margin(net):
    """Smallest |pre-activation| feeding a ReLU in the last forward pass.

    Finite differencing near a ReLU kink compares one-sided slopes, so
    instances whose margin is below the step size are not checkable and
    get redrawn by the caller.
    """
    if isinstance(net, DenseNet):
        _, pre = net._cache
        hidden = pre[:-1]
        return min((float(np.abs(z).min()) for z in hidden), default=np.inf)
    layers = net._cache["layers"]
    return min((float(np.abs(lc["z1"]).min()) for lc in layers), default=np.inf)


def grad_check(net, forward_args, seed, h=1e-4):
    """Max-norm relative error between backprop and central differences.

    The scalar objective is a fixed random linear readout of the net's
    outputs, so its gradient wrt the outputs is the projection itself.
    """
    out = net.forward(*forward_args)
    proj = np.random.default_rng(seed).normal(size=out.shape)
    analytic = np.concatenate([g.ravel() for g in net.backward(proj)])
    x0 = param_vector(net)

    def scalar(vec):
        set_param_vector(net, vec)
        return float((net.forward(*forward_args) * proj).sum())

    numeric = fd_gradient(scalar, x0, h=h)
    set_param_vector(net, x0)
    denom = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max()) / denom


def draw_smooth_instance(make_net, make_args, margin=1e-3, max_tries=60):
    """Draw (net, forward_args) pairs until every ReLU pre-activation sits
    at least `margin` away from zero. Returns the accepted pair."""
    for trial in range(max_tries):
        net = make_net(trial)
        args = make_args(trial)
        net.forward(*args)
        if relu_margin(net) >= margin:
            return net, args
    raise AssertionError(f"no kink-free instance in {max_tries} draws")


STUB_ORACLE_SOURCE = textwrap.dedent(
    """
    import json, math, sys, time

    MODE = sys.argv[1] if len(sys.argv) > 1 else "normal"
    Q = [1.0, 2.0, 0.5]
    W = {(0, 1): 1.0}
    LAM, CURV = 0.5, 0.5
    ASSIGN = [0, 0, 1, 1, 2, 2]

    def value(clusters):
        total = sum(Q[c] for c in clusters)
        for i, a in enumerate(clusters):
            for b in clusters[i + 1:]:
                total -= LAM * W.get((min(a, b), max(a, b)), 0.0)
        return total

    def clusters_of(ids):
        return sorted({ASSIGN[i] for i in ids})

    def loss_of(ids):
        return 0.5 * math.exp(2.5 - CURV * value(clusters_of(ids)))

    def acc_of(ids):
        return max(0.0, min(1.0, 0.5 + 0.1 * value(clusters_of(ids))))

    def send(doc):
        sys.stdout.write(json.dumps(doc) + "\\n")
        sys.stdout.flush()

    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        rid, op = req.get("id"), req.get("op")
        if op == "hello":
            proto = 99 if MODE == "bad-protocol" else 1
            caps = ["eval_loss"] if MODE == "loss-only" else [
                "eval_loss", "eval_acc", "point_losses"]
            send({"id": rid, "protocol": proto, "capabilities": caps})
            continue
        if MODE == "crash":
            print("stub giving up on purpose", file=sys.stderr)
            sys.exit(1)
        if MODE == "slow" and op != "shutdown":
            time.sleep(30)
        if op == "eval_loss":
            if MODE == "malformed":
                sys.stdout.write("not json at all\\n")
                sys.stdout.flush()
            elif MODE == "bad-id":
                send({"id": -1, "loss": 1.0})
            elif MODE == "error-op":
                send({"id": rid, "error": "subset rejected by trainer"})
            else:
                send({"id": rid, "loss": loss_of(req.get("train_ids", []))})
        elif op == "eval_acc":
            send({"id": rid, "acc": acc_of(req.get("train_ids", []))})
        elif op == "point_losses":
            send({"id": rid, "losses": [loss_of([i]) for i in range(len(ASSIGN))]})
        elif op == "shutdown":
            send({"id": rid, "ok": True})
            sys.exit(3 if MODE == "dirty-exit" else 0)
        else:
            send({"id": rid, "error": "unknown op %r" % op})
    """
)


def write_stub_oracle(directory, mode="normal"):
    """Drop the stub script into a directory; returns argv for launching
    it in the requested mode."""
    script = directory / "stub_oracle.py"
    script.write_text(STUB_ORACLE_SOURCE)
    return [sys.executable, str(script), mode]
