"""Exhaustive nearest-neighbor retrieval and Recall@N scoring.

Descriptors are unit rows, so inner product is cosine similarity; search is
a full matrix product with a deterministic tie-break by ascending id. At
desk scale ground truth is place_id equality, with a query's own image id
excluded from its candidates when the splits overlap.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import fileformats
from .errors import FormatError, ValidationError
from .model import DescriptorModel, batch_stacks, describe_stack, feature_stack
from .synth import Manifest, load_image


@dataclass
class DescriptorIndex:
    ids: list
    matrix: np.ndarray
    place_ids: list = None


def build_index(ids, matrix, place_ids=None) -> DescriptorIndex:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValidationError(
            f"index matrix {matrix.shape} does not match {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise ValidationError("index ids must be unique")
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.abs(norms - 1.0) > 1e-5
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"index row {ids[i]!r} has norm {norms[i]:.8f}, expected 1")
    if place_ids is not None and len(place_ids) != len(ids):
        raise ValidationError("place_ids must align with ids")
    return DescriptorIndex(list(ids), matrix, list(place_ids) if place_ids is not None else None)


def knn(index: DescriptorIndex, query, k: int, exclude_id=None) -> list:
    """Top-k ids by descending inner product; ties broken by ascending id."""
    n = len(index.ids)
    if n == 0:
        raise ValidationError("knn over an empty index")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.matrix.shape[1]:
        raise ValidationError(
            f"query dim {q.shape[0]} != index dim {index.matrix.shape[1]}")
    ids = np.asarray(index.ids)
    scores = index.matrix @ q
    if exclude_id is not None:
        keep = ids != exclude_id
        ids, scores = ids[keep], scores[keep]
        n = int(keep.sum())
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} out of range for {n} candidates")
    order = np.lexsort((ids, -scores))
    return ids[order[:k]].tolist()


@dataclass
class EvalResult:
    recall_at: dict                       # N -> percentage
    ranks: list = field(default_factory=list)  # per-query first-correct rank or None

    def lines(self) -> list:
        return [f"R@{n} {self.recall_at[n]:.2f}" for n in sorted(self.recall_at)]


def recall_at_n(ranked, gt, ns) -> EvalResult:
    """ranked: per-query candidate id lists; gt: per-query positive id sets."""
    if len(ranked) != len(gt):
        raise ValidationError(f"{len(ranked)} ranked lists vs {len(gt)} ground-truth sets")
    if not ranked:
        raise ValidationError("no queries to score")
    ns = sorted(set(int(n) for n in ns))
    if not ns or ns[0] < 1:
        raise ValidationError(f"recall cutoffs must be >= 1, got {ns}")
    ranks = []
    for cand, pos in zip(ranked, gt):
        if not pos:
            raise ValidationError("query with empty ground-truth positive set")
        first = None
        for i, cid in enumerate(cand):
            if cid in pos:
                first = i + 1
                break
        ranks.append(first)
    q = len(ranks)
    recall = {n: 100.0 * sum(1 for r in ranks if r is not None and r <= n) / q for n in ns}
    return EvalResult(recall_at=recall, ranks=ranks)


def extract_descriptors(model: DescriptorModel, manifest: Manifest, data_dir,
                        split: str, chunk: int = 32):
    """Descriptors for one split: (ids, (n, D) matrix, place_ids)."""
    rows = manifest.split_rows(split)
    if not rows:
        raise ValidationError(f"split {split!r} is empty")
    ids = [r.image_id for r in rows]
    place_ids = [r.place_id for r in rows]
    out = []
    for i in range(0, len(ids), chunk):
        stacks = [[t.data for t in feature_stack(model, load_image(data_dir, iid))]
                  for iid in ids[i:i + chunk]]
        out.append(describe_stack(model, batch_stacks(stacks)).data)
    return ids, np.vstack(out), place_ids


def evaluate_model(model: DescriptorModel, manifest: Manifest, data_dir,
                   ns=(1, 5, 10)) -> EvalResult:
    """Extract db + query descriptors, search, and score Recall@N."""
    db_ids, db_mat, db_places = extract_descriptors(model, manifest, data_dir, "db")
    q_ids, q_mat, q_places = extract_descriptors(model, manifest, data_dir, "query")
    index = build_index(db_ids, db_mat, db_places)
    return _score(index, q_ids, q_mat, q_places, ns)


def _score(index: DescriptorIndex, q_ids, q_mat, q_places, ns) -> EvalResult:
    by_place: dict = {}
    db_id_set = set(index.ids)
    for iid, pl in zip(index.ids, index.place_ids):
        by_place.setdefault(pl, set()).add(iid)
    ranked, gt = [], []
    for iid, vec, pl in zip(q_ids, q_mat, q_places):
        pos = by_place.get(pl, set()) - {iid}
        if not pos:
            raise ValidationError(f"query {iid!r} has no database positives (place {pl})")
        k = len(index.ids) - (1 if iid in db_id_set else 0)
        ranked.append(knn(index, vec, k, exclude_id=iid))
        gt.append(pos)
    return recall_at_n(ranked, gt, ns)


def read_gt_places(path) -> dict:
    """id -> place_id from a manifest CSV or a descriptor sidecar CSV."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header == ["image_id", "place_id", "split"]:
            idc, plc = 0, 1
        elif header == ["id", "place_id"]:
            idc, plc = 0, 1
        else:
            raise ValidationError(
                f"ground-truth header must be image_id,place_id,split or id,place_id, got {header}")
        out = {}
        for ln, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                out[rec[idc]] = int(rec[plc])
            except (IndexError, ValueError):
                raise ValidationError(f"ground-truth line {ln}: bad record {rec!r}")
    if not out:
        raise ValidationError(f"ground-truth file {path} has no rows")
    return out


def evaluate_files(query_path, db_path, gt_path, ns=(1, 5, 10)) -> EvalResult:
    """Score saved descriptor files against a ground-truth id -> place map."""
    q_mat = fileformats.read_descriptors(query_path)
    q_ids, _ = fileformats.read_sidecar(str(query_path) + ".csv")
    db_mat = fileformats.read_descriptors(db_path)
    db_ids, _ = fileformats.read_sidecar(str(db_path) + ".csv")
    if q_mat.shape[1] != db_mat.shape[1]:
        raise FormatError(
            f"query dim {q_mat.shape[1]} != database dim {db_mat.shape[1]}")
    if q_mat.shape[0] != len(q_ids) or db_mat.shape[0] != len(db_ids):
        raise FormatError("descriptor sidecar row count does not match matrix")
    places = read_gt_places(gt_path)
    try:
        q_places = [places[i] for i in q_ids]
        db_places = [places[i] for i in db_ids]
    except KeyError as e:
        raise ValidationError(f"id {e.args[0]!r} missing from ground truth {gt_path}")
    index = build_index(db_ids, db_mat, db_places)
    return _score(index, q_ids, q_mat, q_places, ns)


def write_recall_csv(path, result: EvalResult) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["N", "recall"])
    for n in sorted(result.recall_at):
        w.writerow([n, f"{result.recall_at[n]:.4f}"])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def write_ranks_csv(path, query_ids, result: EvalResult) -> None:
    if len(query_ids) != len(result.ranks):
        raise ValidationError("query ids do not align with ranks")
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["id", "first_correct_rank"])
    for iid, r in zip(query_ids, result.ranks):
        w.writerow([iid, "" if r is None else r])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())
