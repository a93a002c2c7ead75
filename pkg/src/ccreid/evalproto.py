"""Retrieval evaluation: query and gallery embeddings, pairwise distances,
and CMC / mAP under three gallery-filter settings.

Settings (applied per query):
  general        drop gallery images of the same person seen by the same camera
  cloth_changing additionally drop same-person images in the same clothes
  same_clothes   additionally drop same-person images in different clothes

A query whose filtered gallery holds no image of its person is excluded from
every average. Embeddings come from the raw stream only, so evaluation never
touches parsing files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .datamodel import DatasetIndex, load_image
from .errors import ConfigurationError, ValidationError
from .preprocess import resize_sample

SETTINGS = ("general", "cloth_changing", "same_clothes")
DEFAULT_TOPK = (1, 5, 10)


@dataclass
class EvalResult:
    setting: str
    rank: dict                 # rank cutoff -> CMC value
    mean_ap: float
    per_query_ap: np.ndarray   # NaN where the query was excluded
    num_valid_queries: int

    def summary(self):
        ranks = " ".join(f"rank{k}={v:.4f}" for k, v in sorted(self.rank.items()))
        return (f"{self.setting}: {ranks} mAP={self.mean_ap:.4f} "
                f"({self.num_valid_queries} queries)")


def distance_matrix(query, gallery, metric="cosine"):
    """Pairwise distances between query and gallery embeddings.

    Cosine distance is 1 - cos(q, g); any pair involving a zero-norm vector
    gets the maximum distance 2. Euclidean is the unnormalized L2 distance.
    """
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValidationError(
            f"embedding matrices disagree: query {q.shape}, gallery {g.shape}")
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        denom = qn[:, None] * gn[None, :]
        cos = np.divide(q @ g.T, np.where(denom == 0.0, 1.0, denom))
        cos = np.where(denom == 0.0, -1.0, cos)
        return 1.0 - cos
    if metric == "euclidean":
        sq = (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2.0 * (q @ g.T)
        return np.sqrt(np.maximum(sq, 0.0))
    raise ConfigurationError(f"unknown distance metric {metric!r}")


def discard_mask(setting, q_pid, q_cam, q_clothes, g_pids, g_cams, g_clothes):
    """Gallery entries removed for one query under a setting."""
    same_person = g_pids == q_pid
    drop = same_person & (g_cams == q_cam)
    if setting == "cloth_changing":
        drop = drop | (same_person & (g_clothes == q_clothes))
    elif setting == "same_clothes":
        drop = drop | (same_person & (g_clothes != q_clothes))
    elif setting != "general":
        raise ConfigurationError(f"unknown evaluation setting {setting!r}")
    return drop


def cmc_map(dist, q_pids, q_cams, q_clothes, g_pids, g_cams, g_clothes,
            setting="general", topk=DEFAULT_TOPK):
    """CMC at the requested cutoffs and mAP over valid queries.

    Ties in distance rank by gallery index (stable sort), so results do not
    depend on floating-point ordering accidents. AP for a query is the mean
    of precision-at-rank over the ranks of its correct matches.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_pids = np.asarray(q_pids)
    g_pids = np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    q_clothes, g_clothes = np.asarray(q_clothes), np.asarray(g_clothes)
    num_q, num_g = dist.shape
    if q_pids.shape != (num_q,) or g_pids.shape != (num_g,):
        raise ValidationError("distance matrix and id arrays disagree in size")

    hits = {k: 0 for k in topk}
    per_query_ap = np.full(num_q, np.nan)
    valid = 0
    for qi in range(num_q):
        drop = discard_mask(setting, q_pids[qi], q_cams[qi], q_clothes[qi],
                            g_pids, g_cams, g_clothes)
        kept = np.flatnonzero(~drop)
        if kept.size == 0:
            continue
        order = kept[np.argsort(dist[qi, kept], kind="stable")]
        matches = g_pids[order] == q_pids[qi]
        if not matches.any():
            continue
        valid += 1
        first = int(np.argmax(matches))
        for k in topk:
            hits[k] += first < k
        match_ranks = np.flatnonzero(matches) + 1
        precision = np.arange(1, match_ranks.size + 1) / match_ranks
        per_query_ap[qi] = precision.mean()
    if valid == 0:
        raise ValidationError(f"no valid queries under the {setting} setting")
    rank = {k: hits[k] / valid for k in topk}
    return EvalResult(setting, rank, float(np.nanmean(per_query_ap)),
                      per_query_ap, valid)


@dataclass
class SplitEmbeddings:
    features: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    clothes_ids: np.ndarray
    paths: list = field(default_factory=list)


def extract_embeddings(index: DatasetIndex, model, split, batch_size=64) -> SplitEmbeddings:
    """Embed every image of a split through the raw inference path.

    Only the image files are read; parsing paths are ignored entirely, so a
    gallery with its parsing maps deleted still evaluates.
    """
    entries = index.split_entries(split)
    if not entries:
        raise ValidationError(f"dataset has no {split!r} entries")
    cfg = model.backbone.cfg
    model.eval()
    feats = []
    for i in range(0, len(entries), batch_size):
        chunk = entries[i:i + batch_size]
        images = []
        for e in chunk:
            img = load_image(index, e)
            img, _ = resize_sample(img, None, cfg.input_height, cfg.input_width)
            images.append(img)
        batch = torch.from_numpy(
            np.stack(images).transpose(0, 3, 1, 2).astype(np.float32))
        feats.append(model.infer_embedding(batch).cpu().numpy())
    return SplitEmbeddings(
        features=np.concatenate(feats, axis=0),
        person_ids=np.array([e.person_id for e in entries]),
        camera_ids=np.array([e.camera_id for e in entries]),
        clothes_ids=np.array([e.clothes_id for e in entries]),
        paths=[e.image_path for e in entries],
    )


def evaluate(index: DatasetIndex, model, metric="cosine", settings=SETTINGS,
             topk=DEFAULT_TOPK, batch_size=64):
    """Embed query and gallery once, then score every requested setting."""
    query = extract_embeddings(index, model, "query", batch_size)
    gallery = extract_embeddings(index, model, "gallery", batch_size)
    dist = distance_matrix(query.features, gallery.features, metric)
    results = {}
    for setting in settings:
        results[setting] = cmc_map(
            dist, query.person_ids, query.camera_ids, query.clothes_ids,
            gallery.person_ids, gallery.camera_ids, gallery.clothes_ids,
            setting=setting, topk=topk)
    return results, query, gallery


def write_results(results: dict, path, topk=DEFAULT_TOPK):
    with open(path, "w") as fh:
        cols = ["setting"] + [f"rank{k}" for k in topk] + ["mAP", "num_queries"]
        fh.write("\t".join(cols) + "\n")
        for setting, res in results.items():
            row = [setting]
            row += [f"{res.rank[k]:.6f}" for k in topk]
            row += [f"{res.mean_ap:.6f}", str(res.num_valid_queries)]
            fh.write("\t".join(row) + "\n")


def save_embeddings(path, query: SplitEmbeddings, gallery: SplitEmbeddings):
    np.savez(
        path,
        query_features=query.features.astype("<f4"),
        query_person_ids=query.person_ids,
        query_camera_ids=query.camera_ids,
        query_clothes_ids=query.clothes_ids,
        query_paths=np.array(query.paths),
        gallery_features=gallery.features.astype("<f4"),
        gallery_person_ids=gallery.person_ids,
        gallery_camera_ids=gallery.camera_ids,
        gallery_clothes_ids=gallery.clothes_ids,
        gallery_paths=np.array(gallery.paths),
    )
