"""Linear CKA and the two-block partition search over a model zoo."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg.blas import dsyrk

from .nn import Module
from .zoo import PrototypeModel


class DegenerateFeatureWarning(RuntimeWarning):
    """A feature matrix had zero variance; its CKA score is defined as 0."""


def as_features(act: np.ndarray) -> np.ndarray:
    """Flatten (N, ...) activations into an N x d float64 matrix."""
    act = np.asarray(act)
    if act.ndim < 2 or act.shape[0] < 2:
        raise ValueError(f"need at least 2 samples with features, got shape {act.shape}")
    return act.reshape(act.shape[0], -1).astype(np.float64, copy=False)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two representations of the same ``n`` samples.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` with column-centred inputs.
    When a feature dimension exceeds ``n`` the identical n x n Gram form is used.
    """
    x, y = as_features(x), as_features(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    d1, d2 = xc.shape[1], yc.shape[1]
    if d1 * d2 + d1 * d1 + d2 * d2 <= n * (d1 + d2) + n * n:
        cross = np.sum((yc.T @ xc) ** 2)
        den = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    else:
        k, l = xc @ xc.T, yc @ yc.T
        cross = np.sum(k * l)
        den = np.linalg.norm(k) * np.linalg.norm(l)
    if den <= 0 or not np.isfinite(den):
        warnings.warn("zero-variance features; CKA defined as 0", DegenerateFeatureWarning, stacklevel=2)
        return 0.0
    return float(min(max(cross / den, 0.0), 1.0))


def normalized_gram(act: np.ndarray) -> np.ndarray | None:
    """Double-centred, unit-Frobenius-norm Gram matrix; inner products of two of these
    are linear CKA scores. ``None`` for zero-variance features."""
    act = np.asarray(act)
    if act.ndim < 2 or act.shape[0] < 2:
        raise ValueError(f"need at least 2 samples with features, got shape {act.shape}")
    x = act.reshape(act.shape[0], -1)
    mean = x.mean(axis=0, dtype=np.float64)
    n = x.shape[0]
    k = np.zeros((n, n))
    # column blocks keep the float64 working set small; dsyrk fills the upper triangle
    for j in range(0, x.shape[1], 4096):
        blk = x[:, j:j + 4096].astype(np.float64) - mean[j:j + 4096]
        k = dsyrk(1.0, blk, beta=1.0, c=k, overwrite_c=True)
    k = np.triu(k) + np.triu(k, 1).T
    nrm = np.linalg.norm(k)
    if nrm <= 0 or not np.isfinite(nrm):
        return None
    return k / nrm


def _gram_cka(a: np.ndarray | None, b: np.ndarray | None) -> float:
    if a is None or b is None:
        warnings.warn("zero-variance features; CKA defined as 0", DegenerateFeatureWarning, stacklevel=2)
        return 0.0
    if a is b:
        return 1.0
    return float(min(max(np.sum(a * b), 0.0), 1.0))


def block_similarity(block_a: Module, block_b: Module, inputs_a: np.ndarray, inputs_b: np.ndarray) -> float:
    """Input-output similarity of two blocks: CKA of their outputs plus CKA of their inputs."""
    out_a = block_a.forward(inputs_a, train=False)
    out_b = block_b.forward(inputs_b, train=False)
    s_in = 1.0 if inputs_a is inputs_b else linear_cka(inputs_a, inputs_b)
    return linear_cka(out_a, out_b) + s_in


@dataclass
class PartitionResult:
    model_ids: list[str]
    cuts: dict[str, int]
    anchor_id: str
    anchor_cut: int
    objective: float
    # (model_id, cut, anchor-candidate model_id, anchor cut) -> CKA of the cut features
    table: dict[tuple[str, int, str, int], float] = field(default_factory=dict, repr=False)
    logit_similarity: dict[tuple[str, str], float] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "anchor": {"model": self.anchor_id, "cut": self.anchor_cut},
            "cuts": dict(self.cuts),
            "objective": self.objective,
            "model_ids": list(self.model_ids),
            "similarity": [
                {"model": m, "cut": c, "anchor_model": a, "anchor_cut": ac, "cka": v}
                for (m, c, a, ac), v in self.table.items()
            ],
            "logit_similarity": [{"a": a, "b": b, "cka": v} for (a, b), v in self.logit_similarity.items()],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PartitionResult":
        return cls(
            model_ids=list(doc["model_ids"]),
            cuts={k: int(v) for k, v in doc["cuts"].items()},
            anchor_id=doc["anchor"]["model"],
            anchor_cut=int(doc["anchor"]["cut"]),
            objective=float(doc["objective"]),
            table={(r["model"], r["cut"], r["anchor_model"], r["anchor_cut"]): r["cka"]
                   for r in doc.get("similarity", [])},
            logit_similarity={(r["a"], r["b"]): r["cka"] for r in doc.get("logit_similarity", [])},
        )


def model_ids(zoo: Sequence[PrototypeModel]) -> list[str]:
    levels = [m.level for m in zoo]
    if all(levels) and len(set(levels)) == len(levels):
        return levels
    return [f"{m.arch_id}_{i}" for i, m in enumerate(zoo)]


def capture_features(model: PrototypeModel, probes: np.ndarray, chunk: int = 16) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Eval-mode activations at every cut candidate, plus the logits."""
    graph = model.graph
    parts: dict[int, list[np.ndarray]] = {c: [] for c in model.cut_candidates}
    logits = []
    for start in range(0, len(probes), chunk):
        out = graph.forward(probes[start:start + chunk], train=False, capture=model.cut_candidates)
        for c in model.cut_candidates:
            parts[c].append(graph.captured[c])
        logits.append(out)
    return {c: np.concatenate(v) for c, v in parts.items()}, np.concatenate(logits)


def partition_search(zoo: Sequence[PrototypeModel], probes: np.ndarray, tol: float = 1e-9) -> PartitionResult:
    """Choose one cut per model maximising the summed two-block similarity to an anchor.

    Every (model, cut) pair is tried as the anchor. Given an anchor the remaining
    models' terms are independent, so each picks its own best cut. Ties go to the
    smallest cut index, then to the earliest model.
    """
    if len(zoo) < 2:
        raise ValueError("partition_search needs at least two models")
    for m in zoo:
        if not m.cut_candidates:
            raise ValueError(f"model {m.arch_id} has no cut candidates")
    ids = model_ids(zoo)
    grams: list[dict[int, np.ndarray | None]] = []
    logit_grams = []
    for m in zoo:
        feats, logits = capture_features(m, probes)
        grams.append({c: normalized_gram(f) for c, f in feats.items()})
        logit_grams.append(normalized_gram(logits))
        del feats

    table: dict[tuple[int, int, int, int], float] = {}
    for i, gi in enumerate(grams):
        for f, g in gi.items():
            for a, ga in enumerate(grams):
                for c, h in ga.items():
                    key = (i, f, a, c)
                    if (a, c, i, f) in table:
                        table[key] = table[(a, c, i, f)]
                    else:
                        table[key] = 1.0 if (i, f) == (a, c) else _gram_cka(g, h)
    logit_sim = {(i, a): (1.0 if i == a else _gram_cka(logit_grams[i], logit_grams[a]))
                 for i in range(len(zoo)) for a in range(len(zoo))}

    best = None
    anchors = sorted((c, a) for a, m in enumerate(zoo) for c in m.cut_candidates)
    for c, a in anchors:
        cuts, total = [], 0.0
        for i, m in enumerate(zoo):
            if i == a:
                f = c
            else:
                f, top = m.cut_candidates[0], table[(i, m.cut_candidates[0], a, c)]
                for cand in m.cut_candidates[1:]:
                    v = table[(i, cand, a, c)]
                    if v > top + tol:
                        f, top = cand, v
            cuts.append(f)
            total += _pair_terms(table[(i, f, a, c)], logit_sim[(i, a)])
        if best is None or total > best[0] + tol:
            best = (total, a, c, cuts)

    total, a, c, cuts = best
    return PartitionResult(
        model_ids=ids,
        cuts={ids[i]: f for i, f in enumerate(cuts)},
        anchor_id=ids[a],
        anchor_cut=c,
        objective=total,
        table={(ids[i], f, ids[b], cc): v for (i, f, b, cc), v in table.items()},
        logit_similarity={(ids[i], ids[b]): v for (i, b), v in logit_sim.items()},
    )


def _pair_terms(cut_sim: float, logit_sim: float, input_sim: float = 1.0) -> float:
    # S(front_i, front_anchor) + S(back_i, back_anchor): the front blocks share the raw
    # probe input; the back blocks take the cut features as input and emit logits.
    front = cut_sim + input_sim
    back = logit_sim + cut_sim
    return front + back


def partition_objective(zoo: Sequence[PrototypeModel], probes: np.ndarray, anchor: int,
                        cuts: Sequence[int]) -> float:
    """Re-evaluate the summed similarity for an explicit anchor model and cut vector,
    straight from activations (anchor's own cut is ``cuts[anchor]``)."""
    feats, logits = zip(*(capture_features(m, probes) for m in zoo))
    c = cuts[anchor]
    total = 0.0
    for i in range(len(zoo)):
        cut_sim = 1.0 if i == anchor else linear_cka(feats[i][cuts[i]], feats[anchor][c])
        logit_sim = 1.0 if i == anchor else linear_cka(logits[i], logits[anchor])
        total += _pair_terms(cut_sim, logit_sim)
    return total


def sample_probes(images: np.ndarray, n: int = 256, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(images), size=min(n, len(images)), replace=False)
    return images[np.sort(idx)]
