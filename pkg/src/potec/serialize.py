"""JSON round-trip for policies and regressors built from networks."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bandit_env import ClusterMap
from .errors import ConfigurationError
from .func_approx import Mlp
from .policy import OverallPolicy, SecondStagePolicy, SoftmaxPolicy
from .reward_models import BaselineRegressor, CombinedRegressor, NetRegressor


def _net(m: Mlp) -> dict:
    return {"layer_sizes": list(m.layer_sizes), "params": [float(v) for v in m.params]}


def _cm(cm: ClusterMap) -> dict:
    return {"assignment": [int(a) for a in cm.assignment], "n_clusters": cm.n_clusters}


def to_dict(obj) -> dict:
    if isinstance(obj, SoftmaxPolicy):
        return {"type": "softmax_policy", "net": _net(obj.net), "outcome_space": obj.outcome_space,
                "temperature": obj.temperature}
    if isinstance(obj, NetRegressor):
        return {"type": "net_regressor", "net": _net(obj.net), "kind": obj.kind}
    if isinstance(obj, BaselineRegressor):
        return {"type": "baseline_regressor", "net": _net(obj.net), "cluster_map": _cm(obj.cluster_map)}
    if isinstance(obj, CombinedRegressor):
        return {"type": "combined_regressor", "baseline": to_dict(obj.baseline), "pairwise": to_dict(obj.pairwise)}
    if isinstance(obj, SecondStagePolicy):
        return {"type": "second_stage", "h_model": to_dict(obj.h_model), "cluster_map": _cm(obj.cluster_map)}
    if isinstance(obj, OverallPolicy):
        return {"type": "overall_policy", "first": to_dict(obj.first), "second": to_dict(obj.second)}
    raise ConfigurationError(f"cannot serialize {type(obj).__name__}")


def from_dict(d: dict):
    t = d.get("type")
    net = lambda n: Mlp(tuple(n["layer_sizes"]), np.array(n["params"], dtype=float))
    cm = lambda c: ClusterMap(np.array(c["assignment"], dtype=np.int64), int(c["n_clusters"]))
    if t == "softmax_policy":
        return SoftmaxPolicy(net(d["net"]), d["outcome_space"], float(d["temperature"]))
    if t == "net_regressor":
        return NetRegressor(net(d["net"]), d["kind"])
    if t == "baseline_regressor":
        return BaselineRegressor(net(d["net"]), cm(d["cluster_map"]))
    if t == "combined_regressor":
        return CombinedRegressor(from_dict(d["baseline"]), from_dict(d["pairwise"]))
    if t == "second_stage":
        return SecondStagePolicy(from_dict(d["h_model"]), cm(d["cluster_map"]))
    if t == "overall_policy":
        return OverallPolicy(from_dict(d["first"]), from_dict(d["second"]))
    raise ConfigurationError(f"unknown serialized type {t!r}")


def save(obj, path) -> None:
    Path(path).write_text(json.dumps(to_dict(obj)))


def load(path):
    return from_dict(json.loads(Path(path).read_text()))
