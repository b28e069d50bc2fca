"""Test-time intervention: bottleneck corrections and the related studies.

Sessions overlay user or ground-truth corrections on a frozen model's
predictions; edits recompute only the stages downstream of the edited
bottleneck.  The experiment helpers reproduce the intervention studies:
ground-truth mask substitution, greedy concept-by-concept substitution,
rule-based zeroing from the predicted segmentation, organ-removal bias
probing, and the concepts-only faithfulness comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .interaction import InteractionClassifier, augment_concepts
from .metrics import classification_metrics, concept_metrics
from .observer import one_hot_masks, soft_mask, GROUND_TRUTH
from .pipeline import ModelBundle, anatomy_class_map, infer
from .schema import BINARY_HIGH, BINARY_LOW
from .synth import GeoDataset, ablate_organ

ZEROING_PIXEL_THRESHOLD = 5   # at 64x80; scale proportionally elsewhere


# ---------------------------------------------------------------------------
# single-sample sessions (used directly and by the HTTP service)
# ---------------------------------------------------------------------------


@dataclass
class InterventionSession:
    """Mutable overlay of corrections on one sample's frozen predictions."""

    bundle: ModelBundle
    dataset: GeoDataset
    sample_id: str
    base: dict = field(default_factory=dict)
    mask_overrides: dict = field(default_factory=dict)     # seg name -> plane
    concept_overrides: dict = field(default_factory=dict)  # index -> float
    audit_log: list = field(default_factory=list)

    def __post_init__(self):
        self.sample = self.dataset.samples[self.dataset.index_of(self.sample_id)]
        self._image = self.sample.image[None]
        self.base = infer(self.bundle, self._image)
        self._current = {k: v for k, v in self.base.items()}

    # -- edits ---------------------------------------------------------------

    def set_concept(self, name_or_index, value):
        schema = self.bundle.schema
        idx = (schema.property_index(name_or_index)
               if isinstance(name_or_index, str) else int(name_or_index))
        if not 0 <= idx < schema.n_properties:
            raise KeyError(f"unknown concept index {name_or_index!r}")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"concept value {value} outside [0, 1]")
        self.concept_overrides[idx] = value
        self.audit_log.append({"kind": "concept", "index": idx, "value": value})
        return self.recompute(downstream_of="concepts")

    def set_mask_layer(self, seg_name, plane="ground_truth"):
        schema = self.bundle.schema
        si = schema.segmentation_index(seg_name)
        if isinstance(plane, str):
            if plane == "ground_truth":
                plane_arr = (self.sample.mask == si).astype(np.float64)
            elif plane == "clear":
                plane_arr = np.zeros_like(self.sample.mask, dtype=np.float64)
            else:
                raise ValueError(f"unknown mask source {plane!r}")
        else:
            plane_arr = np.asarray(plane, dtype=np.float64)
            if plane_arr.shape != self.sample.mask.shape:
                raise ValueError("mask override shape mismatch")
            if plane_arr.min() < 0.0 or plane_arr.max() > 1.0:
                raise ValueError("mask override values outside [0, 1]")
        self.mask_overrides[seg_name] = plane_arr
        self.audit_log.append({"kind": "mask", "layer": seg_name,
                               "source": plane if isinstance(plane, str) else "user"})
        return self.recompute(downstream_of="segmentation")

    def clear_edits(self):
        self.mask_overrides.clear()
        self.concept_overrides.clear()
        self.audit_log.append({"kind": "clear"})
        return self.recompute(downstream_of="segmentation")

    # -- recomputation -------------------------------------------------------

    def _segmentation_with_overrides(self):
        seg = self.base["segmentation"].copy()
        if not self.mask_overrides:
            return seg
        schema = self.bundle.schema
        for name, plane in self.mask_overrides.items():
            si = schema.segmentation_index(name)
            old = seg[0, :, :, si]
            others = 1.0 - old
            scale = np.where(others > 1e-9, (1.0 - plane) / np.maximum(others, 1e-9), 0.0)
            seg[0] = seg[0] * scale[:, :, None]
            seg[0, :, :, si] = plane
        # pixels where everything was overridden to 0 fall back to background
        tot = seg[0].sum(axis=-1)
        dead = tot <= 1e-9
        if dead.any():
            seg[0][dead] = 0.0
            seg[0][dead, 0] = 1.0
            tot = seg[0].sum(axis=-1)
        seg[0] /= tot[:, :, None]
        return seg

    def recompute(self, downstream_of="segmentation") -> dict:
        """Re-run stages below the edited bottleneck; upstream stays cached."""
        if downstream_of == "segmentation" or "concepts_raw" not in self._current:
            seg = self._segmentation_with_overrides()
            res = infer(self.bundle, self._image,
                        mask_override=seg if self.mask_overrides else None,
                        concept_overrides=self.concept_overrides)
            self._current = res
        else:
            c = self._current["concepts_raw"].copy()
            for idx, val in self.concept_overrides.items():
                c[:, idx] = val
            full = self.bundle.classifier.forward_full(c)
            cur = dict(self._current)
            cur.update(concepts=c, omega=full["omega"], cbar=full["cbar"],
                       logits=full["logits"], class_probs=full["probs"],
                       prediction=np.argmax(full["probs"], axis=1))
            self._current = cur
        return self.payload()

    def payload(self) -> dict:
        """Everything a client needs to render both bottlenecks."""
        cur = self._current
        schema = self.bundle.schema
        out = {
            "sample_id": self.sample_id,
            "anatomy": self.sample.anatomy,
            "label": self.sample.label,
            "image": self._image[0, :, :, 0],
            "segmentation": cur.get("segmentation",
                                    np.zeros(self._image.shape[1:3] + (0,)))[0]
            if "segmentation" in cur else None,
            "concepts": cur.get("concepts", [[]])[0] if "concepts" in cur else None,
            "omega": cur.get("omega")[0] if cur.get("omega") is not None else None,
            "cbar": float(cur["cbar"][0]) if cur.get("cbar") is not None else None,
            "class_probs": cur["class_probs"][0],
            "prediction": schema.class_labels[int(cur["prediction"][0])],
            "audit_log": list(self.audit_log),
        }
        return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def intervene_segmentation(bundle: ModelBundle, dataset: GeoDataset,
                           split="test") -> dict:
    """Replace predicted masks with ground truth; report metric deltas."""
    if not bundle.has("conceiver") or not bundle.has("observer"):
        raise ValueError(f"variant {bundle.variant!r} lacks a segmentation+concept chain")
    idx = dataset.splits[split]
    images = dataset.images(idx)
    y = dataset.label_indices(idx)
    C = dataset.concept_matrix(idx)
    app = dataset.applicability_matrix(idx)
    schema = dataset.schema
    amap = anatomy_class_map(schema)

    def metrics_of(res):
        cls = classification_metrics(y, res["prediction"], schema.n_classes, amap)
        conc = concept_metrics(res["concepts_raw"], C, app,
                               schema.binary_indices, schema.scalar_indices)
        return {"OA": cls["OA"], "MA": cls["MA"], "MCC": cls["MCC"], **conc}

    base = infer(bundle, images)
    gt = one_hot_masks(dataset.masks(idx), schema.n_segmentation)
    corrected = infer(bundle, images, mask_override=gt)
    return {"without": metrics_of(base), "with": metrics_of(corrected)}


def substitute_concepts(pred, gt, indices) -> np.ndarray:
    """Replace whole concept columns with ground truth (padding included)."""
    out = np.array(pred, copy=True)
    for j in indices:
        out[:, j] = gt[:, j]
    return out


def _oa(classifier: InteractionClassifier, C, y) -> float:
    return float((classifier.predict(C) == y).mean())


def greedy_property_curve(bundle: ModelBundle, dataset: GeoDataset,
                          select_split="test", report_split=None) -> dict:
    """Concept-by-concept greedy substitution with ground truth.

    At step k the concept whose substitution maximizes accuracy on the
    selection split joins the substituted set (ties break to the lowest
    index).  With ``report_split`` set, the curve is also evaluated there:
    selection on validation data is the methodologically safer mode.
    """
    if not bundle.has("classifier") or not bundle.has("conceiver"):
        raise ValueError(f"variant {bundle.variant!r} has no property bottleneck")

    def split_arrays(split):
        idx = dataset.splits[split]
        res = infer(bundle, dataset.images(idx))
        return (res["concepts_raw"], dataset.concept_matrix(idx),
                dataset.label_indices(idx))

    pred_s, gt_s, y_s = split_arrays(select_split)
    report = report_split and report_split != select_split
    if report:
        pred_r, gt_r, y_r = split_arrays(report_split)

    d = pred_s.shape[1]
    chosen: list[int] = []
    curve = [{"k": 0, "concept": None,
              "OA": _oa(bundle.classifier, pred_s, y_s)}]
    if report:
        curve[0]["OA_report"] = _oa(bundle.classifier, pred_r, y_r)
    remaining = list(range(d))
    while remaining:
        best_j, best_oa = None, -1.0
        for j in remaining:
            oa = _oa(bundle.classifier,
                     substitute_concepts(pred_s, gt_s, chosen + [j]), y_s)
            if oa > best_oa + 1e-12:
                best_j, best_oa = j, oa
        chosen.append(best_j)
        remaining.remove(best_j)
        row = {"k": len(chosen),
               "concept": dataset.schema.property_concepts[best_j].name,
               "OA": best_oa}
        if report:
            row["OA_report"] = _oa(bundle.classifier,
                                   substitute_concepts(pred_r, gt_r, chosen), y_r)
        curve.append(row)
    return {"select_split": select_split, "report_split": report_split,
            "order": [dataset.schema.property_concepts[j].name for j in chosen],
            "curve": curve}


def full_substitution_logits(bundle: ModelBundle, dataset: GeoDataset,
                             split="test") -> np.ndarray:
    """Logits with every concept replaced by ground truth (curve endpoint)."""
    idx = dataset.splits[split]
    gt = dataset.concept_matrix(idx)
    return bundle.classifier.forward_full(gt)["logits"]


def rule_based_zeroing(bundle: ModelBundle, images, segmentation=None,
                       threshold_px=ZEROING_PIXEL_THRESHOLD) -> dict:
    """Zero visibility concepts whose organ is missing from the prediction.

    An organ counts as missing when its argmax region is below
    ``threshold_px`` pixels.  Returns corrected concepts and an audit of
    which (sample, concept) pairs fired.
    """
    res = infer(bundle, images, mask_override=segmentation)
    seg = res["segmentation"]
    concepts = res["concepts_raw"]
    hard = np.argmax(seg, axis=-1)
    corrected = concepts.copy()
    fired = []
    for ci, si in bundle.schema.visibility_pairs():
        areas = (hard == si).sum(axis=(1, 2))
        hit = areas < threshold_px
        if hit.any():
            corrected[hit, ci] = 0.0
            for n in np.where(hit)[0]:
                fired.append({"sample": int(n), "concept_index": int(ci),
                              "area_px": int(areas[n])})
    return {"concepts": corrected, "fired": fired}


def organ_ablation_experiment(bundles: dict, dataset: GeoDataset,
                              organs=None, split="test",
                              max_per_organ=80) -> dict:
    """Mean predicted visibility of organs removed from the image.

    A model that reads the organ's region reports near-zero visibility on
    ablated images; a model leaning on context stays high.  Also reports
    the un-ablated control mean.
    """
    schema = dataset.schema
    organs = organs or [("disk", "blob_round"), ("disk", "curvilinear"),
                        ("ring", "thalamus"), ("ring", "csp")]
    vis_of = {}
    for anatomy, seg_name in organs:
        matches = [ci for ci, si in schema.visibility_pairs()
                   if schema.segmentation_concepts[si] == seg_name
                   and schema.property_concepts[ci].anatomy == anatomy]
        if not matches:
            raise KeyError(f"no visibility concept for organ {seg_name!r} "
                           f"in anatomy {anatomy!r}")
        vis_of[(anatomy, seg_name)] = matches[0]

    out = {}
    for (anatomy, seg_name), ci in vis_of.items():
        rows = [s for s in dataset.subset(split)
                if s.anatomy == anatomy
                and s.provenance.organs.get(seg_name, {}).get("kappa", 0) > 0]
        rows = rows[:max_per_organ]
        if not rows:
            continue
        ablated = np.stack([ablate_organ(schema, s, seg_name).image for s in rows])
        control = np.stack([s.image for s in rows])
        entry = {"concept": schema.property_concepts[ci].name, "n": len(rows)}
        for name, bundle in bundles.items():
            va = infer(bundle, ablated)["concepts_raw"][:, ci]
            vc = infer(bundle, control)["concepts_raw"][:, ci]
            entry[name] = {"ablated_mean": float(va.mean()),
                           "ablated_std": float(va.std()),
                           "control_mean": float(vc.mean())}
        out[f"{anatomy}/{seg_name}"] = entry
    return out


def frozen_interaction_values(bundle: ModelBundle, C) -> np.ndarray:
    """Per-sample interaction scalar from a frozen trained module."""
    if not bundle.has("classifier") or not bundle.classifier.use_interaction:
        raise ValueError("bundle has no trained interaction module")
    return bundle.classifier.forward_full(np.asarray(C))["cbar"]


def faithfulness_experiment(dataset: GeoDataset, cbar_values, seed=0,
                            epochs=50, lr=1e-4, dtype="float64") -> dict:
    """Concepts-only predictive comparison: c versus c + sqrt(cbar).

    Both MLPs share the architecture (one 1024-unit hidden layer) and are
    trained on ground-truth concepts; cbar stays frozen per sample.
    """
    schema = dataset.schema
    tr, va, te = (dataset.splits[s] for s in ("train", "val", "test"))
    C_all = dataset.concept_matrix(np.arange(len(dataset)))
    y_all = np.array([schema.class_index(s.label) for s in dataset.samples])
    cbar = np.asarray(cbar_values, dtype=np.float64)
    if cbar.shape != (len(dataset),):
        raise ValueError("cbar_values must align with the dataset")
    aug = augment_concepts(C_all, cbar)
    pos_of = {g: i for i, g in enumerate(tr)}
    over_local = np.array([pos_of[g] for g in dataset.oversample_train])
    amap = anatomy_class_map(schema)

    out = {}
    for name, X in (("concepts_only", C_all), ("concepts_plus_interaction", aug)):
        clf = InteractionClassifier(
            n_classes=schema.n_classes, use_interaction=False,
            epochs=epochs, lr=lr, seed=seed, dtype=dtype)
        clf.fit(X[tr], y_all[tr], X[va], y_all[va], train_index_list=over_local)
        pred = clf.predict(X[te])
        m = classification_metrics(y_all[te], pred, schema.n_classes, amap)
        out[name] = {"OA": m["OA"], "MA": m["MA"], "MCC": m["MCC"]}
    return out
