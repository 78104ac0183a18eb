"""Registration-driven dataset synthesis.

A template case ``t`` is registered onto every partner ``p`` in the pool,
giving a velocity ``v`` with ``t o exp(v)`` close to ``p``.  Each pair then
yields two new labeled cases: the template carried into the partner's shape
(forward) and the partner carried into the template's shape (backward, via
``exp(-v)``).  Labels travel with their own image, so annotations stay
consistent without any manual work.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deform import (
    DimsMismatch,
    RegistrationConfig,
    VelocityField,
    exp_velocity,
    register,
    warp_image,
    warp_labels,
)
from .volume_io import NUM_CLASSES, ImageVolume, LabelVolume, load, save

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "liverseg-manifest-v1"
EXCLUSION_RULES = ("self", "templates")
PUBLISHED_THREE_TEMPLATE_COUNT = 510


class UnknownTemplate(KeyError):
    pass


class PoolTooSmall(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    kind: str  # "original" | "synthesized"
    template_id: str | None = None
    partner_id: str | None = None
    direction: str | None = None  # "forward" | "backward"

    def __post_init__(self):
        if self.kind == "original":
            if self.template_id or self.partner_id or self.direction:
                raise ValueError("original cases carry no template/partner")
        elif self.kind == "synthesized":
            if not (self.template_id and self.partner_id):
                raise ValueError("synthesized cases need a template and a partner")
            if self.direction not in ("forward", "backward"):
                raise ValueError(f"direction must be forward or backward, got {self.direction!r}")
        else:
            raise ValueError(f"unknown provenance kind {self.kind!r}")

    def to_dict(self):
        if self.kind == "original":
            return {"kind": "original"}
        return {"kind": self.kind, "template_id": self.template_id,
                "partner_id": self.partner_id, "direction": self.direction}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("template_id"), d.get("partner_id"), d.get("direction"))


@dataclass(frozen=True, eq=False)
class LabeledCase:
    id: str
    image: ImageVolume
    labels: LabelVolume
    provenance: Provenance = Provenance("original")

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise DimsMismatch(f"{self.id}: image {self.image.dims} vs labels {self.labels.dims}")
        if self.image.spacing != self.labels.spacing:
            raise DimsMismatch(f"{self.id}: image spacing {self.image.spacing} vs labels {self.labels.spacing}")

    @property
    def dims(self):
        return self.image.dims

    def __eq__(self, other):
        return (isinstance(other, LabeledCase) and self.id == other.id
                and self.image == other.image and self.labels == other.labels
                and self.provenance == other.provenance)


def synthesized_id(template_id, partner_id, direction):
    return f"{template_id}__{partner_id}__{direction}"


def synthesize_pair(a: LabeledCase, b: LabeledCase, v: VelocityField, exp_steps: int = 6):
    """(a o exp(v), b o exp(-v)) as new cases; ``a`` is the template."""
    if not (a.dims == b.dims == tuple(v.dims)):
        raise DimsMismatch(f"case dims {a.dims}, {b.dims} vs field {tuple(v.dims)}")
    fwd = exp_velocity(v, exp_steps)
    bwd = exp_velocity(-v, exp_steps)
    out_a = LabeledCase(
        synthesized_id(a.id, b.id, "forward"),
        warp_image(a.image, fwd), warp_labels(a.labels, fwd),
        Provenance("synthesized", a.id, b.id, "forward"),
    )
    out_b = LabeledCase(
        synthesized_id(a.id, b.id, "backward"),
        warp_image(b.image, bwd), warp_labels(b.labels, bwd),
        Provenance("synthesized", a.id, b.id, "backward"),
    )
    return out_a, out_b


def partners_for(template_id, pool_ids, templates, exclusion="self"):
    if exclusion == "self":
        return [p for p in pool_ids if p != template_id]
    if exclusion == "templates":
        return [p for p in pool_ids if p not in templates]
    raise ValueError(f"exclusion must be one of {EXCLUSION_RULES}, got {exclusion!r}")


def synthesized_count(n_templates: int, pool_size: int, exclusion: str = "self") -> int:
    """Number of cases ``expand_dataset`` produces, without running it."""
    if exclusion == "self":
        return 2 * n_templates * (pool_size - 1)
    if exclusion == "templates":
        return 2 * n_templates * (pool_size - n_templates)
    raise ValueError(f"exclusion must be one of {EXCLUSION_RULES}, got {exclusion!r}")


def counting_report(n_templates: int, pool_size: int, exclusion: str = "self") -> str:
    """Human-readable count line(s); flags the published 3-template figure when it disagrees."""
    n = synthesized_count(n_templates, pool_size, exclusion)
    lines = [f"synthesized: {n}"]
    if n_templates == 3 and n != PUBLISHED_THREE_TEMPLATE_COUNT:
        lines.append(
            f"note: published 3-template count is {PUBLISHED_THREE_TEMPLATE_COUNT} "
            f"(85 partners per template); exclude-self gives {synthesized_count(3, pool_size, 'self')}, "
            f"exclude-templates gives {synthesized_count(3, pool_size, 'templates')}"
        )
    return "\n".join(lines)


def missing_classes(case: LabeledCase):
    """Foreground classes absent from ``case.labels`` (automated stand-in for manual review)."""
    return sorted(set(range(1, NUM_CLASSES)) - case.labels.classes())


def expand_dataset(templates, pool, cfg: RegistrationConfig | None = None, exclusion: str = "self"):
    """Register each template onto each partner and synthesize two cases per pair.

    Output is ordered by (template id, partner id, forward before backward)
    and has ``synthesized_count(len(templates), len(pool), exclusion)`` entries.
    """
    cfg = cfg or RegistrationConfig()
    by_id = {c.id: c for c in pool}
    if len(by_id) != len(pool):
        raise ValueError("pool case IDs must be unique")
    if len(pool) < 2:
        raise PoolTooSmall(f"need at least 2 pool cases, got {len(pool)}")
    templates = sorted(set(templates))
    unknown = [t for t in templates if t not in by_id]
    if unknown:
        raise UnknownTemplate(f"templates not in pool: {unknown}")
    pool_ids = sorted(by_id)

    out = []
    for t in templates:
        for p in partners_for(t, pool_ids, templates, exclusion):
            tmpl, part = by_id[t], by_id[p]
            v = register(part.image, tmpl.image, cfg)
            pair = synthesize_pair(tmpl, part, v, cfg.exp_steps)
            for case in pair:
                miss = missing_classes(case)
                if miss:
                    log.warning("%s: classes %s missing after warping", case.id, miss)
            out.extend(pair)
    return out


# -- manifest ----------------------------------------------------------------------

def write_dataset(cases, out_dir, manifest_name="manifest.json") -> Path:
    """Write each case as an image/label NIfTI pair and a manifest listing them.

    Manifest schema::

        {"format": "liverseg-manifest-v1",
         "cases": [{"id": str, "image": relpath, "labels": relpath,
                    "provenance": {"kind": "original"} |
                                  {"kind": "synthesized", "template_id": str,
                                   "partner_id": str, "direction": "forward"|"backward"}}]}

    Paths are relative to the manifest's directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        img_rel, lab_rel = f"{case.id}_image.nii", f"{case.id}_labels.nii"
        save(case.image, out_dir / img_rel)
        save(case.labels, out_dir / lab_rel)
        entries.append({"id": case.id, "image": img_rel, "labels": lab_rel,
                        "provenance": case.provenance.to_dict()})
    path = out_dir / manifest_name
    write_manifest(entries, path)
    return path


def write_manifest(entries, path):
    doc = {"format": MANIFEST_FORMAT, "cases": list(entries)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path):
    """Manifest entries with paths resolved against the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} document")
    entries = []
    for e in doc.get("cases", []):
        try:
            entries.append({
                "id": str(e["id"]),
                "image": (path.parent / e["image"]).resolve(),
                "labels": (path.parent / e["labels"]).resolve(),
                "provenance": Provenance.from_dict(e.get("provenance", {"kind": "original"})),
            })
        except (KeyError, TypeError) as err:
            raise ManifestError(f"{path}: malformed case entry {e!r} ({err})") from None
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate case IDs")
    return entries


def load_dataset(path):
    return [
        LabeledCase(e["id"], load(e["image"], kind="image"), load(e["labels"], kind="labels"), e["provenance"])
        for e in read_manifest(path)
    ]


def case_arrays(case: LabeledCase):
    """(float32 image, int64 labels) copies for training code."""
    return np.array(case.image.data, dtype=np.float32), np.array(case.labels.data, dtype=np.int64)
