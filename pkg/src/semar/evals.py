"""Evaluation: toy QA benchmark, OLS scaling fit, round-trip attribute
preservation, and pixel-space generation quality."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import toyworld as tw
from .backbone import span_attention_mask
from .model import UnifiedModel
from .tensor import Tensor


# ---------------------------------------------------------------------------
# QA benchmark
# ---------------------------------------------------------------------------


def _qa_prompts(samples, limit: int | None):
    """Flatten (sample, question, answer) triples; question length is fixed."""
    triples = []
    for s in samples:
        for q, a in s.qa:
            triples.append((s, q, a))
            if limit is not None and len(triples) >= limit:
                return triples
    return triples


def qa_accuracy(model: UnifiedModel, samples, limit: int | None = None,
                batch_size: int = 64) -> float:
    """Exact-match accuracy with the answer constrained to the question's
    candidate set (all questions here have single-token answers)."""
    triples = _qa_prompts(samples, limit)
    if not triples:
        raise ValueError("QA set is empty")
    v = tw.VOCAB
    d = model.bb_cfg.dim
    n_slots = tw.NUM_SLOTS
    q_len = len(triples[0][1])
    t_total = 2 + n_slots + 2 + q_len + 1  # bos boi slots eoi q-mark question a-mark
    span = np.full((1, t_total), -1, dtype=np.int32)
    span[0, 2:2 + n_slots] = 0
    mask = span_attention_mask(span)
    correct = 0
    with T.no_grad():
        for start in range(0, len(triples), batch_size):
            chunk = triples[start:start + batch_size]
            b = len(chunk)
            feats = np.stack([s.semantic for s, _, _ in chunk]).astype(T.default_dtype())
            slot_emb = model.visual_proj(Tensor(feats)).data  # (b, 16, D)
            emb = np.zeros((b, t_total, d), dtype=T.default_dtype())
            tok = model.backbone.token_emb.data
            emb[:, 0] = tok[v.bos]
            emb[:, 1] = tok[v.boi]
            emb[:, 2:2 + n_slots] = slot_emb
            emb[:, 2 + n_slots] = tok[v.eoi]
            emb[:, 3 + n_slots] = tok[v.q]
            for row, (_, q, _) in enumerate(chunk):
                emb[row, 4 + n_slots:4 + n_slots + q_len] = tok[q]
            emb[:, -1] = tok[v.a]
            z = model.backbone(Tensor(emb), np.broadcast_to(mask, (b,) + mask.shape[1:]))
            logits = z.data[:, -1] @ model.backbone.text_head.w.data
            for row, (_, q, a) in enumerate(chunk):
                cands = list(tw.answer_candidates(q))
                pick = cands[int(np.argmax(logits[row, cands]))]
                correct += int(pick == a)
    return correct / len(triples)


def oracle_qa_accuracy(samples) -> float:
    """Upper-bound harness: answer by reading the scene; checks label soundness."""
    triples = _qa_prompts(samples, None)
    if not triples:
        raise ValueError("QA set is empty")
    correct = 0
    for s, q, a in triples:
        words = tw.VOCAB.decode(q)
        ans = None
        if words[:2] == ["what", "color"]:
            hits = [o for o in s.scene.objects if o.shape == words[4]]
            ans = hits[0].color if len(hits) == 1 else None
        elif words[0] == "where":
            hits = [o for o in s.scene.objects
                    if o.color == words[3] and o.shape == words[4]]
            ans = tw.position_name(hits[0].row, hits[0].col) if len(hits) == 1 else None
        else:
            pos = words[4]
            for o in s.scene.objects:
                if tw.position_name(o.row, o.col) == pos:
                    ans = o.shape
        correct += int(ans is not None and tw.VOCAB.ids[ans] == a)
    return correct / len(triples)


def qa_chance_level(samples, limit: int | None = None) -> float:
    """Expected accuracy of uniform guessing over each question's candidates."""
    triples = _qa_prompts(samples, limit)
    if not triples:
        raise ValueError("QA set is empty")
    return float(np.mean([1.0 / len(tw.answer_candidates(q)) for _, q, _ in triples]))


# ---------------------------------------------------------------------------
# scaling fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    rss: float
    n_points: int


def fit_scaling(points) -> ScalingFit:
    """Ordinary least squares for y = a*n + b, closed form."""
    pts = [(float(n), float(y)) for n, y in points]
    if len(pts) < 2:
        raise ValueError("scaling fit needs at least 2 points")
    n = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.all(n == n[0]):
        raise ValueError("scaling fit is degenerate: all n equal")
    nbar, ybar = n.mean(), y.mean()
    a = float(((n - nbar) * (y - ybar)).sum() / ((n - nbar) ** 2).sum())
    b = float(ybar - a * nbar)
    rss = float(((y - (a * n + b)) ** 2).sum())
    return ScalingFit(slope=a, intercept=b, rss=rss, n_points=len(pts))


def format_slope(a: float) -> str:
    return f"{round(a * 1e4)}×10⁻⁴"


# ---------------------------------------------------------------------------
# round-trip attribute preservation
# ---------------------------------------------------------------------------


@dataclass
class AttributeReport:
    per_object: list = field(default_factory=list)
    aggregate: float = 0.0
    parse_failed: bool = False


def attribute_preservation(original_ids, regenerated_ids) -> AttributeReport:
    """Compare two captions object-by-object after greedy position matching."""
    orig = tw.parse_caption(list(original_ids))
    if orig is None:
        raise ValueError("original caption does not parse: corpus bug")
    regen = tw.parse_caption(list(regenerated_ids))
    if regen is None:
        return AttributeReport(parse_failed=True)
    regen_left = list(regen.objects)
    report = AttributeReport()
    pairs = []
    for o in orig.objects:  # pass 1: exact position matches
        hit = next((g for g in regen_left if (g.row, g.col) == (o.row, o.col)), None)
        if hit is not None:
            regen_left.remove(hit)
        pairs.append((o, hit))
    for i, (o, hit) in enumerate(pairs):  # pass 2: leftovers in row-major order
        if hit is None and regen_left:
            pairs[i] = (o, regen_left.pop(0))
    score = 0
    for o, g in pairs:
        row = {"shape": False, "color": False, "position": False}
        if g is not None:
            row = {"shape": g.shape == o.shape, "color": g.color == o.color,
                   "position": (g.row, g.col) == (o.row, o.col)}
        report.per_object.append(row)
        score += sum(row.values())
    report.aggregate = score / (3 * len(orig.objects))
    return report


def shuffled_chance(original_list, regenerated_list,
                    rng: np.random.Generator, rounds: int = 5) -> float:
    """Chance baseline: score captions against a shuffled pairing."""
    n = len(original_list)
    if n < 2:
        raise ValueError("need at least two captions to shuffle")
    totals = []
    for _ in range(rounds):
        perm = rng.permutation(n)
        for i in range(n):  # avoid accidental identity pairs
            if perm[i] == i:
                j = (i + 1) % n
                perm[i], perm[j] = perm[j], perm[i]
        scores = []
        for i in range(n):
            rep = attribute_preservation(original_list[i], regenerated_list[perm[i]])
            scores.append(rep.aggregate)
        totals.append(float(np.mean(scores)))
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# pixel quality
# ---------------------------------------------------------------------------


def pixel_quality(scene: tw.Scene, raster: np.ndarray) -> dict:
    """Latent MSE against the ground-truth render plus per-cell attribute accuracy."""
    want = tw.render(scene)
    if raster.shape != want.shape:
        raise ValueError(f"raster shape {raster.shape}, want {want.shape}")
    latent_mse = float(np.mean((tw.encode_pixel(raster) - tw.encode_pixel(want)) ** 2))
    truth: dict[int, tuple[str, str]] = {
        o.row * tw.GRID + o.col: (o.color, o.shape) for o in scene.objects}
    got = tw.classify_cells(raster)
    hits = sum(int(got[i] == truth.get(i)) for i in range(tw.NUM_SLOTS))
    return {"latent_mse": latent_mse, "attribute_accuracy": hits / tw.NUM_SLOTS}
