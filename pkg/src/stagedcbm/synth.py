"""Deterministic geo-scan image generator.

Renders one of four synthetic anatomies per image (bar / disk / ring /
wedge) on a 64x80 canvas, returning the image, a per-pixel class map,
ground-truth property concepts derived analytically from the geometry,
and the rule-derived class label.  Everything is a pure function of
(profile, seed): datasets are byte-identical per seed.

Organ visibility is the rendering contrast kappa, drawn from a quantized
grid of tenths, so scalar concepts have an exact image correlate.
kappa == 0 means the organ is absent: it leaves no mask pixels and no
intensity bump.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .schema import ConceptSchema, ConceptVector, apply_rules, smooth_labels

CANVAS_H = 64
CANVAS_W = 80
CONTRAST_AMP = 1.30
BODY_FILL = 0.30          # interior fill fraction of the outline contrast
BG_LEVEL = -0.60

_KAPPA_LEVELS = np.round(np.arange(0, 11) / 10.0, 1)

# probability over kappa levels 0.0 .. 1.0 for organs the rules want
# visible (mass above 0.5) and for organs the rules want absent
_P_REQUIRED = np.array([0.04, 0.01, 0.02, 0.09, 0.14, 0.14, 0.14, 0.14,
                        0.12, 0.09, 0.07])
_P_UNWANTED = np.array([0.55, 0.0, 0.0, 0.07, 0.07, 0.07, 0.06, 0.06,
                        0.05, 0.04, 0.03])


@dataclass
class DifficultyProfile:
    """Sampling ranges for scene parameters.

    The default mix produces borderline cases on purpose: kappa mass near
    the 0.5 visibility threshold, angles near 45 degrees and occupancies
    near 0.5 keep the classification problem from saturating.
    """

    name: str = "default"
    noise_sigma: float = 0.08
    kappa_required: tuple = tuple(_P_REQUIRED)
    kappa_unwanted: tuple = tuple(_P_UNWANTED)
    angle_low: float = 15.0
    angle_high: float = 75.0
    area_low: float = 0.34     # body area ratio range; SP needs > 0.5
    area_high: float = 0.66
    offset_symmetric_sd: float = 1.6
    offset_asym_low: float = 5.0
    offset_asym_high: float = 13.0
    p_offset: float = 0.45     # probability of drawing an off-center body


@dataclass
class SceneSpec:
    """Full provenance of one rendered scene."""

    anatomy: str
    seed: int
    profile: str
    noise_sigma: float
    organs: dict = field(default_factory=dict)   # name -> geometry + kappa
    body: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Sample:
    sample_id: str
    anatomy: str
    image: np.ndarray          # (H, W, 1) float in [-1, 1]
    mask: np.ndarray           # (H, W) uint8 class indices
    concepts: ConceptVector    # smoothed ground truth
    label: str
    provenance: SceneSpec


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:CANVAS_H, 0:CANVAS_W].astype(np.float64)


def _ellipse(cy, cx, ry, rx, phi_deg=0.0):
    phi = np.deg2rad(phi_deg)
    dx, dy = _XX - cx, _YY - cy
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _capsule(cy, cx, half_len, radius, theta_deg):
    th = np.deg2rad(theta_deg)
    ux, uy = np.cos(th), -np.sin(th)          # y axis points down
    px, py = _XX - cx, _YY - cy
    t = np.clip(px * ux + py * uy, -half_len, half_len)
    return (px - t * ux) ** 2 + (py - t * uy) ** 2 <= radius ** 2


def _curve(points, thickness):
    """Mask of pixels within ``thickness`` of a sampled polyline."""
    best = np.full((CANVAS_H, CANVAS_W), np.inf)
    for px, py in points:
        d2 = (_XX - px) ** 2 + (_YY - py) ** 2
        np.minimum(best, d2, out=best)
    return best <= thickness ** 2


def _mirror_iou(fg):
    mirrored = fg[:, ::-1]
    union = np.logical_or(fg, mirrored).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(fg, mirrored).sum() / union)


def _kappa(rng, probs):
    probs = np.asarray(probs)
    levels = _KAPPA_LEVELS[-len(probs):]    # shorter prob vectors drop low tail
    return float(rng.choice(levels, p=probs / probs.sum()))


# ---------------------------------------------------------------------------
# per-anatomy scene sampling
# ---------------------------------------------------------------------------


def _body_center(rng, prof):
    """Horizontal offset drives the symmetry concept; vertical is jitter."""
    if rng.uniform() < prof.p_offset:
        off = rng.uniform(prof.offset_asym_low, prof.offset_asym_high)
        off *= rng.choice([-1.0, 1.0])
    else:
        off = rng.normal(0.0, prof.offset_symmetric_sd)
    cy = CANVAS_H / 2 + rng.normal(0.0, 1.5)
    cx = CANVAS_W / 2 + off
    return float(cy), float(cx)


def _sample_bar(rng, prof):
    theta = float(rng.uniform(prof.angle_low, prof.angle_high))
    # upper range compensates canvas clipping of long capsules
    target = rng.uniform(prof.area_low + 0.05, prof.area_high + 0.14) * CANVAS_H * CANVAS_W
    cy = CANVAS_H / 2 + rng.normal(0.0, 2.0)
    cx = CANVAS_W / 2 + rng.normal(0.0, 2.5)
    th = np.deg2rad(theta)
    margin = 5.0
    lim_x = (CANVAS_W / 2 - margin) / max(np.cos(th), 0.25)
    lim_y = (CANVAS_H / 2 - margin) / max(np.sin(th), 0.25)
    half_len = min(lim_x, lim_y, 36.0)
    # capsule area = 4*L*r + pi r^2; solve r for the target area
    radius = (-4 * half_len + np.sqrt(16 * half_len ** 2 + 4 * np.pi * target)) / (2 * np.pi)
    radius = min(radius, CANVAS_H / 2 - margin)
    cap_r = rng.uniform(4.5, 6.0)
    body = {"cy": float(cy), "cx": float(cx), "half_len": float(half_len),
            "radius": float(radius), "theta": theta,
            "kappa": _kappa(rng, _P_REQUIRED[3:])}  # body always visible
    organs = {
        "cap_left": {"r": float(cap_r), "kappa": _kappa(rng, prof.kappa_required)},
        "cap_right": {"r": float(cap_r), "kappa": _kappa(rng, prof.kappa_required)},
    }
    return body, organs


def _body_ellipse(rng, prof):
    target = rng.uniform(prof.area_low, prof.area_high) * CANVAS_H * CANVAS_W
    q = rng.uniform(0.68, 0.84)                 # ry / rx
    ry = np.sqrt(target * q / np.pi)
    rx = ry / q
    ry = min(ry, CANVAS_H / 2 - 3)
    rx = min(rx, CANVAS_W / 2 - 3)
    return float(ry), float(rx)


def _sample_disk(rng, prof):
    cy, cx = _body_center(rng, prof)
    ry, rx = _body_ellipse(rng, prof)
    phi = rng.normal(0.0, 5.0)
    body = {"cy": cy, "cx": cx, "ry": float(ry), "rx": float(rx),
            "phi": float(phi), "kappa": _kappa(rng, _P_REQUIRED[3:])}
    organs = {
        "blob_round": {
            "dy": float(rng.uniform(-0.25, 0.25) * ry),
            "dx": float(rng.uniform(-0.45, -0.05) * rx),
            "ry": float(rng.uniform(5.0, 8.0)), "rx": float(rng.uniform(6.0, 9.5)),
            "phi": float(rng.uniform(-30, 30)),
            "kappa": _kappa(rng, prof.kappa_required)},
        "curvilinear": {
            "amp": float(rng.uniform(3.0, 7.0)),
            "phase": float(rng.uniform(0, 2 * np.pi)),
            "span": float(rng.uniform(0.9, 1.4) * rx),
            "dy": float(rng.uniform(-0.15, 0.35) * ry),
            "thickness": float(rng.uniform(2.2, 3.2)),
            "kappa": _kappa(rng, prof.kappa_required)},
        "kidney": {
            "dy": float(rng.uniform(0.15, 0.45) * ry),
            "dx": float(rng.uniform(0.1, 0.45) * rx),
            "ry": float(rng.uniform(4.5, 7.0)), "rx": float(rng.uniform(5.5, 8.0)),
            "phi": float(rng.uniform(-40, 40)),
            "kappa": _kappa(rng, prof.kappa_unwanted)},
    }
    return body, organs


def _sample_ring(rng, prof):
    cy, cx = _body_center(rng, prof)
    ry, rx = _body_ellipse(rng, prof)
    phi = rng.normal(0.0, 5.0)
    body = {"cy": cy, "cx": cx, "ry": float(ry), "rx": float(rx),
            "phi": float(phi), "rim": float(rng.uniform(0.82, 0.88)),
            "kappa": _kappa(rng, _P_REQUIRED[3:])}
    organs = {
        "thalamus": {
            "dy": float(rng.uniform(-0.1, 0.15) * ry),
            "dx": float(rng.uniform(-0.15, 0.15) * rx),
            "ry": float(rng.uniform(4.5, 6.5)), "rx": float(rng.uniform(7.0, 10.0)),
            "phi": float(rng.uniform(-25, 25)),
            "kappa": _kappa(rng, prof.kappa_required)},
        "csp": {
            "dy": float(rng.uniform(-0.45, -0.2) * ry),
            "dx": float(rng.uniform(-0.2, 0.2) * rx),
            "ry": float(rng.uniform(3.0, 4.5)), "rx": float(rng.uniform(4.0, 6.0)),
            "phi": float(rng.uniform(-20, 20)),
            "kappa": _kappa(rng, prof.kappa_required)},
        "cerebellum": {
            "dy": float(rng.uniform(0.3, 0.55) * ry),
            "dx": float(rng.uniform(-0.2, 0.2) * rx),
            "ry": float(rng.uniform(4.0, 6.0)), "rx": float(rng.uniform(8.0, 12.0)),
            "phi": float(rng.uniform(-15, 15)),
            "kappa": _kappa(rng, prof.kappa_unwanted)},
    }
    return body, organs


def _sample_wedge(rng, prof):
    # band area ratio drawn across 0.40..0.85; the SP window is [0.5, 0.75]
    ratio = rng.uniform(0.40, 0.85)
    height = ratio * CANVAS_H
    top = rng.uniform(2.0, CANVAS_H - height - 2.0) if height < CANVAS_H - 4 else 2.0
    amp_t = rng.uniform(0.0, 3.0)
    amp_b = rng.uniform(0.0, 3.0)
    # a tilted band mirrors to the opposite tilt: slope controls symmetry
    symmetricish = rng.uniform() > prof.p_offset
    slope = (float(rng.normal(0.0, 0.015)) if symmetricish
             else float(rng.choice([-1.0, 1.0]) * rng.uniform(0.09, 0.22)))
    ph_t = float(rng.choice([0.0, np.pi]))
    ph_b = float(rng.choice([0.0, np.pi]))
    body = {"top": float(top), "height": float(height), "slope": slope,
            "amp_t": float(amp_t), "amp_b": float(amp_b),
            "ph_t": ph_t, "ph_b": ph_b,
            "kappa": _kappa(rng, _P_REQUIRED[3:])}
    mid = top + height / 2
    organs = {
        "curvilinear": {
            "amp": float(rng.uniform(2.0, min(6.0, height / 3))),
            "phase": ph_t if symmetricish else float(rng.uniform(0, 2 * np.pi)),
            "span": float(rng.uniform(0.80, 0.95) * CANVAS_W),
            "cy": float(mid + rng.uniform(-0.15, 0.15) * height),
            "thickness": float(rng.uniform(2.2, 3.2)),
            "kappa": _kappa(rng, prof.kappa_required)},
        "blob_round": {
            "cy": float(mid + rng.uniform(-0.2, 0.2) * height / 2),
            "cx": float(CANVAS_W * rng.uniform(0.2, 0.8)),
            "ry": float(rng.uniform(4.5, 7.0)), "rx": float(rng.uniform(5.5, 8.5)),
            "phi": float(rng.uniform(-30, 30)),
            "kappa": _kappa(rng, prof.kappa_unwanted)},
    }
    return body, organs


_SAMPLERS = {"bar": _sample_bar, "disk": _sample_disk,
             "ring": _sample_ring, "wedge": _sample_wedge}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _render(schema: ConceptSchema, spec: SceneSpec):
    """Build (intensity image without noise, class map) from a scene spec."""
    img = np.full((CANVAS_H, CANVAS_W), BG_LEVEL)
    mask = np.zeros((CANVAS_H, CANVAS_W), dtype=np.uint8)
    a = spec.anatomy
    body = spec.body
    amp = CONTRAST_AMP
    idx = schema.segmentation_index

    def paint(region, contrast):
        img[region] += contrast * amp

    if a == "bar":
        cap_l = spec.organs["cap_left"]
        cap_r = spec.organs["cap_right"]
        th = np.deg2rad(body["theta"])
        ux, uy = np.cos(th), -np.sin(th)
        ex = body["half_len"] * ux
        ey = body["half_len"] * uy
        p0 = (body["cx"] - ex, body["cy"] - ey)   # smaller x: the left end
        p1 = (body["cx"] + ex, body["cy"] + ey)
        if p0[0] > p1[0]:
            p0, p1 = p1, p0
        bm = _capsule(body["cy"], body["cx"], body["half_len"],
                      body["radius"], body["theta"])
        paint(bm, body["kappa"])
        mask[bm] = idx("body")
        for name, cap, cen in (("cap_left", cap_l, p0), ("cap_right", cap_r, p1)):
            if cap["kappa"] > 0:
                cm = _ellipse(cen[1], cen[0], cap["r"], cap["r"]) & bm
                paint(cm, 0.9 * cap["kappa"])
                mask[cm] = idx(name)
    elif a in ("disk", "ring"):
        bm = _ellipse(body["cy"], body["cx"], body["ry"], body["rx"], body["phi"])
        if a == "disk":
            rim = bm & ~_ellipse(body["cy"], body["cx"], 0.90 * body["ry"],
                                 0.90 * body["rx"], body["phi"])
        else:
            rim = bm & ~_ellipse(body["cy"], body["cx"], body["rim"] * body["ry"],
                                 body["rim"] * body["rx"], body["phi"])
        paint(bm, BODY_FILL * body["kappa"])
        paint(rim, (1.0 - BODY_FILL) * body["kappa"])
        mask[bm] = idx("body")
        for name in ("blob_round", "kidney", "thalamus", "csp", "cerebellum"):
            organ = spec.organs.get(name)
            if not organ or organ["kappa"] <= 0:
                continue
            om = _ellipse(body["cy"] + organ["dy"], body["cx"] + organ["dx"],
                          organ["ry"], organ["rx"], organ["phi"]) & bm
            paint(om, organ["kappa"])
            mask[om] = idx(name)
        vein = spec.organs.get("curvilinear")
        if vein and vein["kappa"] > 0:
            t = np.linspace(0.0, 1.0, 160)
            px = body["cx"] + (t - 0.5) * vein["span"]
            py = (body["cy"] + vein["dy"]
                  + vein["amp"] * np.sin(2 * np.pi * t + vein["phase"]))
            cm = _curve(list(zip(px, py)), vein["thickness"]) & bm
            paint(cm, vein["kappa"])
            mask[cm] = idx("curvilinear")
    elif a == "wedge":
        x = np.arange(CANVAS_W)
        tilt = body.get("slope", 0.0) * (x - CANVAS_W / 2)
        y_top = (body["top"] + tilt
                 + body["amp_t"] * np.sin(2 * np.pi * x / CANVAS_W + body["ph_t"]))
        y_bot = (body["top"] + body["height"] + tilt
                 + body["amp_b"] * np.sin(2 * np.pi * x / CANVAS_W + body["ph_b"]))
        bm = (_YY >= y_top) & (_YY <= y_bot)
        edges = bm & ((_YY <= y_top + 2.0) | (_YY >= y_bot - 2.0))
        paint(bm, BODY_FILL * body["kappa"])
        paint(edges, (1.0 - BODY_FILL) * body["kappa"])
        mask[bm] = idx("body")
        blob = spec.organs.get("blob_round")
        if blob and blob["kappa"] > 0:
            om = _ellipse(blob["cy"], blob["cx"], blob["ry"], blob["rx"],
                          blob["phi"]) & bm
            paint(om, blob["kappa"])
            mask[om] = idx("blob_round")
        canal = spec.organs.get("curvilinear")
        if canal and canal["kappa"] > 0:
            t = np.linspace(0.0, 1.0, 160)
            px = CANVAS_W / 2 + (t - 0.5) * canal["span"]
            py = (canal["cy"] + body.get("slope", 0.0) * (px - CANVAS_W / 2)
                  + canal["amp"] * np.sin(2 * np.pi * t + canal["phase"]))
            cm = _curve(list(zip(px, py)), canal["thickness"]) & bm
            paint(cm, canal["kappa"])
            mask[cm] = idx("curvilinear")
    else:
        raise KeyError(f"unknown anatomy {a!r}")

    return img, mask


def _concepts_from_scene(schema: ConceptSchema, spec: SceneSpec, mask):
    """Analytic ground-truth concepts; see the schema's generation block."""
    a = spec.anatomy
    fg = mask > 0
    area_ratio = fg.mean()
    raw = np.zeros(schema.n_properties)
    app = schema.applicability(a)

    def put(name, value):
        raw[schema.property_index(name)] = value

    if a == "bar":
        put("bar_end_left_visible", spec.organs["cap_left"]["kappa"])
        put("bar_end_right_visible", spec.organs["cap_right"]["kappa"])
        put("bar_angle_ok", 1.0 if spec.body["theta"] < 45.0 else 0.0)
        put("bar_occupancy_ok", 1.0 if area_ratio > 0.5 else 0.0)
    elif a == "disk":
        put("disk_symmetric", 1.0 if _mirror_iou(fg) >= 0.8 else 0.0)
        put("disk_stomach_visible", spec.organs["blob_round"]["kappa"])
        put("disk_vein_visible", spec.organs["curvilinear"]["kappa"])
        put("disk_kidney_visible", spec.organs["kidney"]["kappa"])
        put("disk_occupancy_ok", 1.0 if area_ratio > 0.5 else 0.0)
    elif a == "ring":
        put("ring_symmetric", 1.0 if _mirror_iou(fg) >= 0.8 else 0.0)
        put("ring_thalamus_visible", spec.organs["thalamus"]["kappa"])
        put("ring_csp_visible", spec.organs["csp"]["kappa"])
        put("ring_cerebellum_visible", spec.organs["cerebellum"]["kappa"])
        put("ring_occupancy_ok", 1.0 if area_ratio > 0.5 else 0.0)
    elif a == "wedge":
        put("wedge_occupancy_ok", 1.0 if 0.5 <= area_ratio <= 0.75 else 0.0)
        put("wedge_bladder_visible", spec.organs["blob_round"]["kappa"])
        put("wedge_symmetric", 1.0 if _mirror_iou(fg) >= 0.8 else 0.0)
        put("wedge_canal_visible", spec.organs["curvilinear"]["kappa"])

    return smooth_labels(raw, app, schema)


def generate_scene(schema: ConceptSchema, anatomy: str, seed: int,
                   profile: DifficultyProfile | None = None,
                   sample_id: str | None = None) -> Sample:
    """Render one scene; deterministic per (anatomy, seed, profile).

    Reusing a seed with a different profile yields a different sample;
    distinctness is only guaranteed per (seed, profile) pair.
    """
    if anatomy not in _SAMPLERS:
        raise KeyError(f"unknown anatomy {anatomy!r}")
    profile = profile or DifficultyProfile()
    rng = np.random.default_rng(np.random.SeedSequence((seed, _anat_code(anatomy))))
    body, organs = _SAMPLERS[anatomy](rng, profile)
    spec = SceneSpec(anatomy=anatomy, seed=seed, profile=profile.name,
                     noise_sigma=profile.noise_sigma, organs=organs, body=body)
    return _realize(schema, spec, sample_id or f"{anatomy}-{seed}")


def _anat_code(anatomy):
    return {"bar": 1, "disk": 2, "ring": 3, "wedge": 4}[anatomy]


def _realize(schema, spec, sample_id) -> Sample:
    img, mask = _render(schema, spec)
    # noise comes from its own stream so organ ablation can re-render the
    # identical scene minus one organ
    noise_rng = np.random.default_rng(
        np.random.SeedSequence((spec.seed, _anat_code(spec.anatomy), 7)))
    noise = noise_rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img + noise, -1.0, 1.0)
    concepts = _concepts_from_scene(schema, spec, mask)
    label = apply_rules(schema, concepts, spec.anatomy)
    return Sample(sample_id=sample_id, anatomy=spec.anatomy,
                  image=img[..., None], mask=mask, concepts=concepts,
                  label=label, provenance=spec)


def ablate_organ(schema: ConceptSchema, sample: Sample, organ: str) -> Sample:
    """Re-render a sample with one organ removed (contrast 0, mask cleared).

    The region the organ covered shows the surrounding render (body fill
    or background) under the sample's original noise field; all derived
    concepts and the label are recomputed.  Raises if the organ is not
    present in the sample.
    """
    organs = sample.provenance.organs
    if organ not in organs or organs[organ]["kappa"] <= 0:
        raise KeyError(f"organ {organ!r} not present in sample {sample.sample_id}")
    spec = SceneSpec(anatomy=sample.provenance.anatomy,
                     seed=sample.provenance.seed,
                     profile=sample.provenance.profile,
                     noise_sigma=sample.provenance.noise_sigma,
                     organs=json.loads(json.dumps(organs)),
                     body=dict(sample.provenance.body))
    spec.organs[organ]["kappa"] = 0.0
    return _realize(schema, spec, sample.sample_id + f"-no-{organ}")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

TABLE_COUNTS = {  # per-class counts mirroring the clinical class imbalance
    "bar SP": 539, "bar NSP": 59,
    "disk SP": 133, "disk NSP": 545,
    "ring SP": 65, "ring NSP": 556,
    "wedge SP": 687, "wedge NSP": 82,
}

SPLIT_FRACTIONS = {"train": 0.5, "val": 0.1, "test": 0.4}


def default_counts(total=4000) -> dict:
    """Scale the reference class proportions to ``total`` samples."""
    base = sum(TABLE_COUNTS.values())
    counts = {k: int(round(v * total / base)) for k, v in TABLE_COUNTS.items()}
    largest = max(counts, key=counts.get)
    counts[largest] += total - sum(counts.values())
    return counts


def balanced_counts(total=4000) -> dict:
    per = total // 8
    return {label: per for label in TABLE_COUNTS}


class GeoDataset:
    """In-memory dataset: samples plus split indices and oversampling list."""

    def __init__(self, schema, samples, splits, oversample_train, seed, counts):
        self.schema = schema
        self.samples = samples
        self.splits = splits                    # split name -> index array
        self.oversample_train = oversample_train  # index list incl. repeats
        self.seed = seed
        self.counts = counts
        self._by_id = {s.sample_id: i for i, s in enumerate(samples)}

    def __len__(self):
        return len(self.samples)

    def index_of(self, sample_id):
        return self._by_id[sample_id]

    def subset(self, split):
        return [self.samples[i] for i in self.splits[split]]

    def images(self, idx):
        return np.stack([self.samples[i].image for i in idx])

    def masks(self, idx):
        return np.stack([self.samples[i].mask for i in idx])

    def concept_matrix(self, idx):
        return np.stack([self.samples[i].concepts.values for i in idx])

    def applicability_matrix(self, idx):
        return np.stack([self.samples[i].concepts.applicability for i in idx])

    def label_indices(self, idx):
        return np.array([self.schema.class_index(self.samples[i].label)
                         for i in idx], dtype=np.int64)

    def anatomies(self, idx):
        return [self.samples[i].anatomy for i in idx]


def generate_dataset(schema: ConceptSchema, counts: dict | None = None,
                     seed: int = 0,
                     profile: DifficultyProfile | None = None) -> GeoDataset:
    """Generate a dataset with the requested per-class counts.

    Scenes are drawn per anatomy and kept when the rule-derived label
    matches a class that still needs samples (rejection sampling over a
    deterministic seed sequence).  Samples are shuffled, then each class
    is split 50/10/40 into train/val/test, disjoint by id.  Training
    indices of the four smallest classes are repeated in the oversampling
    list.
    """
    counts = dict(counts or default_counts())
    profile = profile or DifficultyProfile()
    need = dict(counts)
    collected = {label: [] for label in counts}
    draw = 0
    max_draws = 400 * sum(counts.values())
    while any(v > 0 for v in need.values()) and draw < max_draws:
        for anatomy in schema.anatomies:
            sp, nsp = f"{anatomy} SP", f"{anatomy} NSP"
            if need.get(sp, 0) <= 0 and need.get(nsp, 0) <= 0:
                continue
            s = generate_scene(schema, anatomy, seed=(seed * 1000003 + draw),
                               profile=profile)
            if need.get(s.label, 0) > 0:
                need[s.label] -= 1
                collected[s.label].append(s)
            draw += 1
    missing = {k: v for k, v in need.items() if v > 0}
    if missing:
        raise RuntimeError(f"generation stalled; still missing {missing}")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 99)))
    samples, splits = [], {"train": [], "val": [], "test": []}
    for label in sorted(collected):
        group = collected[label]
        rng.shuffle(group)
        n = len(group)
        n_train = int(round(n * SPLIT_FRACTIONS["train"]))
        n_val = int(round(n * SPLIT_FRACTIONS["val"]))
        for j, s in enumerate(group):
            i = len(samples)
            s.sample_id = f"s{i:05d}"
            samples.append(s)
            split = ("train" if j < n_train
                     else "val" if j < n_train + n_val else "test")
            splits[split].append(i)
    splits = {k: np.array(v, dtype=int) for k, v in splits.items()}

    # oversampling list: minority classes repeated toward the majority size
    train_idx = splits["train"]
    train_labels = [samples[i].label for i in train_idx]
    sizes = {lab: train_labels.count(lab) for lab in counts}
    largest = max(sizes.values())
    minority = sorted(sizes, key=sizes.get)[:4]
    over = []
    for i, lab in zip(train_idx, train_labels):
        reps = max(1, min(8, round(largest / (2 * sizes[lab])))) if lab in minority else 1
        over.extend([i] * reps)
    return GeoDataset(schema, samples, splits, np.array(over, dtype=int),
                      seed, counts)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------
#
# A dataset directory contains ``manifest.jsonl`` plus one binary per
# sample under ``samples/``.  Manifest line 1 is a header object (kind,
# version, schema name, seed, counts, split sizes, oversample ids); every
# further line describes one sample: id, split, anatomy, label, smoothed
# concept values, applicability mask, scene provenance.
#
# Sample binary layout (little endian):
#   0   4  magic b"GSB1"
#   4   2  u16 height
#   6   2  u16 width
#   8   2  u16 image channels m
#   10  2  u16 reserved (0)
#   12  .. image float32 LE, row-major (h*w*m values)
#   ..  .. mask uint8 class indices (h*w values)

import struct as _struct
from pathlib import Path as _Path

_SAMPLE_MAGIC = b"GSB1"


def save_dataset(ds: GeoDataset, out_dir) -> None:
    out = _Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    split_of = {}
    for split, idx in ds.splits.items():
        for i in idx:
            split_of[int(i)] = split
    with open(out / "manifest.jsonl", "w") as fh:
        header = {
            "kind": "geoscan-dataset", "version": 1,
            "schema": ds.schema.name, "seed": ds.seed,
            "counts": ds.counts,
            "oversample_train_ids": [ds.samples[i].sample_id
                                     for i in ds.oversample_train],
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, s in enumerate(ds.samples):
            row = {
                "id": s.sample_id, "split": split_of[i],
                "anatomy": s.anatomy, "label": s.label,
                "concepts": [float(v) for v in s.concepts.values],
                "applicability": [bool(b) for b in s.concepts.applicability],
                "provenance": asdict(s.provenance),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            _write_sample_bin(out / "samples" / f"{s.sample_id}.bin", s)


def _write_sample_bin(path, s: Sample) -> None:
    h, w, m = s.image.shape
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_MAGIC)
        fh.write(_struct.pack("<HHHH", h, w, m, 0))
        fh.write(s.image.astype("<f4").tobytes())
        fh.write(s.mask.astype(np.uint8).tobytes())


def _read_sample_bin(path):
    blob = _Path(path).read_bytes()
    if blob[:4] != _SAMPLE_MAGIC:
        raise ValueError(f"{path}: not a geo-scan sample")
    h, w, m, _ = _struct.unpack_from("<HHHH", blob, 4)
    off = 12
    img = np.frombuffer(blob, dtype="<f4", count=h * w * m, offset=off)
    img = img.reshape(h, w, m).astype(np.float64)
    off += 4 * h * w * m
    mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off)
    return img, mask.reshape(h, w).copy()


def load_dataset(in_dir, schema: ConceptSchema) -> GeoDataset:
    src = _Path(in_dir)
    lines = (src / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("kind") != "geoscan-dataset":
        raise ValueError(f"{in_dir}: not a dataset directory")
    samples, splits = [], {"train": [], "val": [], "test": []}
    for line in lines[1:]:
        row = json.loads(line)
        img, mask = _read_sample_bin(src / "samples" / f"{row['id']}.bin")
        prov = SceneSpec(**row["provenance"])
        cv = ConceptVector(np.array(row["concepts"]),
                           np.array(row["applicability"], dtype=bool))
        splits[row["split"]].append(len(samples))
        samples.append(Sample(sample_id=row["id"], anatomy=row["anatomy"],
                              image=img, mask=mask, concepts=cv,
                              label=row["label"], provenance=prov))
    ds = GeoDataset(schema, samples,
                    {k: np.array(v, dtype=int) for k, v in splits.items()},
                    np.array([], dtype=int), header["seed"], header["counts"])
    ds.oversample_train = np.array(
        [ds.index_of(sid) for sid in header["oversample_train_ids"]], dtype=int)
    return ds
