"""Benchmark generation, on-disk format, validation, and sample loading.

Directory layout under the dataset root:

    manifest.json
    shapes/<id>/mesh.obj             normalized source mesh, one group per part
    shapes/<id>/poses.json           the 20 reference camera poses
    shapes/<id>/views/v00..v19.pgm   8-bit renders (textureless gray)
    shapes/<id>/depth/v00..v19.pgm   16-bit depth, raw = depth * 10000
    queries/<split>/<sample-id>.pgm  8-bit query renders

The manifest holds per-split sample records.  A sample is anomalous iff it
carries an anomaly record iff it carries a bbox ([top, left, bottom, right),
half-open pixel coords of the anomalous part's visible mask).  Splits are
shape-disjoint: shape ids are ranked by md5 and sliced into train/val/test.
Regenerating with the same config and seed reproduces every byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import anomalies as an
from . import cameras as cam
from . import geometry as geo
from . import pgmio
from . import rendering as rnd

MANIFEST_NAME = "manifest.json"
DATASET_VERSION = "1"
CAMERA_ATTEMPTS = 4  # IoU/visibility strikes before the anomaly is redrawn
ANOMALY_ATTEMPTS = 60
_FAMILY_CYCLE = ("chair", "chair", "stool", "chair", "bench")
QUERY_ALBEDO_RANGE = (0.45, 0.95)


class DatasetBuildError(RuntimeError):
    pass


@dataclass
class GenConfig:
    shapes_train: int = 200
    shapes_val: int = 25
    shapes_test: int = 25
    queries_per_shape: int = 8
    anomaly_ratio: float = 0.56
    resolution: int = 64

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "GenConfig":
        return GenConfig(**obj)

    def validate(self) -> None:
        if min(self.shapes_train, self.shapes_val, self.shapes_test) < 1:
            raise ValueError("each split needs at least one shape")
        if self.queries_per_shape < 1:
            raise ValueError("queries_per_shape must be positive")
        if not 0.0 <= self.anomaly_ratio <= 1.0:
            raise ValueError("anomaly_ratio must lie in [0, 1]")
        if self.resolution < 16 or self.resolution % 8 != 0:
            raise ValueError("resolution must be >= 16 and divisible by 8")


@dataclass
class ViewSet:
    shape_id: str
    images: np.ndarray  # (N, H, W) float32
    depths: np.ndarray  # (N, H, W) float32
    poses: list[cam.CameraPose]

    def images_3ch(self) -> np.ndarray:
        """Grayscale cloned to three identical channels: (N, 3, H, W)."""
        return np.repeat(self.images[:, None, :, :], 3, axis=1)


def bbox_from_mask(mask: np.ndarray) -> list[int]:
    """Tight [top, left, bottom, right) box around a non-empty mask."""
    rows, cols = np.nonzero(mask)
    return [int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1]


def _shape_ids_and_splits(config: GenConfig, seed: int) -> tuple[dict[str, dict], dict[str, list[str]]]:
    n_total = config.shapes_train + config.shapes_val + config.shapes_test
    infos = {}
    for idx in range(n_total):
        sid = f"s{idx:05d}"
        infos[sid] = {
            "family": _FAMILY_CYCLE[idx % len(_FAMILY_CYCLE)],
            "seed": seed * 1_000_003 + idx,
            "dir": f"shapes/{sid}",
        }
    ranked = sorted(infos, key=lambda s: (hashlib.md5(s.encode()).hexdigest(), s))
    splits = {
        "train": ranked[: config.shapes_train],
        "val": ranked[config.shapes_train : config.shapes_train + config.shapes_val],
        "test": ranked[config.shapes_train + config.shapes_val :],
    }
    for split, ids in splits.items():
        for sid in ids:
            infos[sid]["split"] = split
    return infos, splits


def _split_sampling_plan(ids: list[str], config: GenConfig, rng: np.random.Generator) -> dict[str, list[str | None]]:
    """Per-shape query slots: None = normal, otherwise the anomaly kind.

    The split-level anomaly count follows the configured ratio; kinds are
    balanced round-robin (histogram max-min <= 1) and dealt to shapes in a
    seeded random order.
    """
    total = len(ids) * config.queries_per_shape
    n_anom = int(round(total * config.anomaly_ratio))
    kinds = [an.ANOMALY_KINDS[i % len(an.ANOMALY_KINDS)] for i in range(n_anom)]
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    slots: dict[str, list[str | None]] = {sid: [None] * config.queries_per_shape for sid in ids}
    flat = [(sid, k) for sid in ids for k in range(config.queries_per_shape)]
    chosen = rng.permutation(len(flat))[:n_anom]
    for j, kind in zip(sorted(chosen.tolist()), kinds):
        sid, k = flat[j]
        slots[sid][k] = kind
    return slots


def _eligible_parts(mesh: geo.Mesh, graph: geo.PartGraph, kind: str) -> list[str]:
    names = sorted(mesh.parts)
    if kind == "rotational":
        return [n for n in names if graph.points_of(n)]
    if kind == "missing":
        return [n for n in names if n not in an.ESSENTIAL_PARTS] if len(names) > 2 else []
    return names


def _missing_feasible(mesh: geo.Mesh, graph: geo.PartGraph) -> bool:
    """True when at least one part can be removed and still pass QC."""
    for part in _eligible_parts(mesh, graph, "missing"):
        out, rec = an.apply_missing(mesh, part)
        if an.qc_plausibility(out, rec, graph):
            return True
    return False


def _repair_plan(plan: dict, order: list, built: dict) -> None:
    """Move 'missing' slots off shapes where no removal can pass QC.

    Removal feasibility is a pure function of the mesh (a 3-legged stool can
    never lose a part), so it is checked before any rendering and repaired by
    swapping kinds between slots; the split keeps its exact kind histogram.
    """
    feasible = {sid: _missing_feasible(*built[sid]) for sid in built}
    for sid, q in order:
        if plan[sid][q] != "missing" or feasible[sid]:
            continue
        partner = None
        for sid2, q2 in order:
            if sid2 != sid and feasible[sid2] and plan[sid2][q2] not in (None, "missing"):
                partner = (sid2, q2)
                break
        if partner is None:
            raise DatasetBuildError(
                f"shape {sid} cannot host a missing anomaly and no slot is left to trade with"
            )
        plan[sid][q], plan[partner[0]][partner[1]] = plan[partner[0]][partner[1]], "missing"


def _make_anomaly(
    mesh: geo.Mesh,
    graph: geo.PartGraph,
    kind: str,
    family: str,
    geo_seed: int,
    rng: np.random.Generator,
) -> tuple[geo.Mesh, an.AnomalyRecord] | None:
    """One attempt at a QC-passing deformed mesh; None = redraw."""
    parts = _eligible_parts(mesh, graph, kind)
    if not parts:
        return None
    part = parts[int(rng.integers(len(parts)))]
    try:
        if kind == "positional":
            out, rec = an.apply_positional(mesh, part, rng)
        elif kind == "rotational":
            out, rec = an.apply_rotational(mesh, part, graph, rng)
        elif kind == "broken":
            out, rec = an.apply_broken(mesh, part, rng)
        elif kind == "missing":
            out, rec = an.apply_missing(mesh, part)
        elif kind == "swapped":
            donor_seed = geo_seed + 7919 * int(rng.integers(1, 50))
            donor = geo.normalize_mesh(geo.build_parametric_object(donor_seed, family))
            if part not in donor.parts:
                return None
            out, rec = an.apply_swap(mesh, donor, part, rng)
            rec.params["donor"] = str(donor_seed)
        else:
            raise ValueError(f"unknown anomaly kind {kind!r}")
    except an.AnomalyError:
        return None
    if not an.qc_plausibility(out, rec, graph):
        return None
    return out, rec


def _render_query(
    mesh_normal: geo.Mesh,
    mesh_anom: geo.Mesh | None,
    rec: an.AnomalyRecord | None,
    res: int,
    rng: np.random.Generator,
) -> tuple[rnd.RenderedView, list[int] | None, dict] | None:
    """Sample query cameras until filters pass (<= CAMERA_ATTEMPTS tries).

    Returns (view to store, bbox, pose json) or None when every camera angle
    failed, meaning the caller should redraw the anomaly itself.
    """
    part_names = sorted(mesh_normal.parts)
    for _ in range(CAMERA_ATTEMPTS):
        pose = cam.sample_query_camera(rng, res)
        albedos = {n: float(rng.uniform(*QUERY_ALBEDO_RANGE)) for n in part_names}
        if rec is None:
            view = rnd.rasterize(mesh_normal, pose, albedos=albedos)
            return view, None, pose.to_json()
        part = rec.part
        before = rnd.rasterize(mesh_normal, pose, albedos=albedos, with_masks=True)
        after = rnd.rasterize(mesh_anom, pose, albedos=albedos, with_masks=True)
        mask_before = before.masks[part]
        if rec.kind == "missing":
            # the part is absent from the deformed mesh; its ghost region in
            # the normal render defines visibility and the bbox
            mask_after = np.zeros_like(mask_before)
            visible = rnd.anomaly_visible(before, part) > 0
            bbox_mask = mask_before
        else:
            mask_after = after.masks[part]
            visible = rnd.anomaly_visible(after, part) > 0
            bbox_mask = mask_after
        if not visible:
            continue
        if not rnd.iou_view_filter(mask_before, mask_after):
            continue
        return after, bbox_from_mask(bbox_mask), pose.to_json()
    return None


def build_dataset(config: GenConfig, out_dir, rng: np.random.Generator) -> dict:
    """Generate the benchmark tree under out_dir and return the manifest."""
    config.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    res = config.resolution
    seed_echo = int(rng.integers(2**31))  # consumed first: ties shape seeds to the rng
    infos, splits = _shape_ids_and_splits(config, seed_echo)

    ref_poses = cam.sample_reference_cameras(res)
    poses_json = json.dumps({"views": [p.to_json() for p in ref_poses]}, sort_keys=True)

    samples: dict[str, list[dict]] = {"train": [], "val": [], "test": []}
    for split in ("train", "val", "test"):
        plan = _split_sampling_plan(splits[split], config, rng)
        order = [(sid, q) for sid in splits[split] for q in range(config.queries_per_shape)]
        pos_of = {sq: i for i, sq in enumerate(order)}
        built = {}
        for sid in splits[split]:
            info = infos[sid]
            mesh = geo.normalize_mesh(geo.build_parametric_object(info["seed"], info["family"]))
            built[sid] = (mesh, geo.part_adjacency(mesh))
        _repair_plan(plan, order, built)
        counter = 0
        for sid in splits[split]:
            info = infos[sid]
            mesh, graph = built[sid]

            shape_dir = root / info["dir"]
            (shape_dir / "views").mkdir(parents=True, exist_ok=True)
            (shape_dir / "depth").mkdir(parents=True, exist_ok=True)
            geo.save_obj(mesh, shape_dir / "mesh.obj")
            (shape_dir / "poses.json").write_text(poses_json + "\n")
            for k, pose in enumerate(ref_poses):
                view = rnd.rasterize(mesh, pose)
                pgmio.write_pgm8(shape_dir / "views" / f"v{k:02d}.pgm", view.image)
                pgmio.write_pgm16(shape_dir / "depth" / f"v{k:02d}.pgm", view.depth)

            for qi in range(config.queries_per_shape):
                kind = plan[sid][qi]
                made = rec = None
                while True:
                    if kind is None:
                        made = _render_query(mesh, None, None, res, rng)
                        rec = None
                        break
                    for _ in range(ANOMALY_ATTEMPTS):
                        drawn = _make_anomaly(mesh, graph, kind, info["family"], info["seed"], rng)
                        if drawn is None:
                            continue
                        mesh_anom, rec = drawn
                        made = _render_query(mesh, mesh_anom, rec, res, rng)
                        if made is not None:
                            break
                    if made is not None:
                        break
                    # draws for this kind keep failing QC on this shape;
                    # trade kinds with a later slot (another shape first) so
                    # the split keeps its exact kind histogram
                    swap = None
                    tail = order[pos_of[(sid, qi)] + 1 :]
                    for other_shape_only in (True, False):
                        for sid2, q2 in tail:
                            if plan[sid2][q2] in (None, kind):
                                continue
                            if other_shape_only and sid2 == sid:
                                continue
                            swap = (sid2, q2)
                            break
                        if swap is not None:
                            break
                    if swap is None:
                        done = sum(len(v) for v in samples.values())
                        raise DatasetBuildError(
                            f"shape {sid}: no acceptable {kind} anomaly after "
                            f"{ANOMALY_ATTEMPTS} draws and no slot left to trade "
                            f"with ({done} samples generated so far)"
                        )
                    plan[sid][qi], plan[swap[0]][swap[1]] = plan[swap[0]][swap[1]], kind
                    kind = plan[sid][qi]
                view, bbox, pose_json = made
                sample_id = f"q{counter:05d}"
                counter += 1
                rel = f"queries/{split}/{sample_id}.pgm"
                (root / "queries" / split).mkdir(parents=True, exist_ok=True)
                pgmio.write_pgm8(root / rel, view.image)
                samples[split].append(
                    {
                        "id": sample_id,
                        "shape": sid,
                        "path": rel,
                        "label": 0 if kind is None else 1,
                        "anomaly": rec.to_json() if rec else None,
                        "bbox": bbox,
                        "pose": pose_json,
                    }
                )

    manifest = {
        "version": DATASET_VERSION,
        "config": config.to_json(),
        "seed_echo": seed_echo,
        "shapes": infos,
        "samples": samples,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return manifest


def load_manifest(root) -> dict:
    return json.loads((Path(root) / MANIFEST_NAME).read_text())


def load_viewset(root, manifest: dict, shape_id: str) -> ViewSet:
    shape_dir = Path(root) / manifest["shapes"][shape_id]["dir"]
    poses = [cam.CameraPose.from_json(p) for p in json.loads((shape_dir / "poses.json").read_text())["views"]]
    images, depths = [], []
    for k in range(len(poses)):
        images.append(pgmio.read_pgm(shape_dir / "views" / f"v{k:02d}.pgm"))
        depths.append(pgmio.read_pgm(shape_dir / "depth" / f"v{k:02d}.pgm"))
    return ViewSet(shape_id, np.stack(images), np.stack(depths), poses)


_VIEWSET_CACHE: dict[tuple[str, str], ViewSet] = {}


def load_sample(root, manifest: dict, split: str, index: int):
    """-> (query (3, H, W) float32, ViewSet, label, bbox or None)."""
    rec = manifest["samples"][split][index]
    img = pgmio.read_pgm(Path(root) / rec["path"])
    query = np.repeat(img[None, :, :], 3, axis=0)
    key = (str(root), rec["shape"])
    vs = _VIEWSET_CACHE.get(key)
    if vs is None:
        if len(_VIEWSET_CACHE) > 512:
            _VIEWSET_CACHE.clear()
        vs = load_viewset(root, manifest, rec["shape"])
        _VIEWSET_CACHE[key] = vs
    return query, vs, int(rec["label"]), rec["bbox"]


def validate_dataset(root) -> list[str]:
    """Check manifest invariants and file presence; returns violations."""
    root = Path(root)
    problems = []
    try:
        manifest = load_manifest(root)
    except FileNotFoundError:
        return [f"missing {MANIFEST_NAME}"]
    except json.JSONDecodeError as e:
        return [f"unparseable manifest: {e}"]

    by_split: dict[str, set[str]] = {}
    for split, recs in manifest["samples"].items():
        by_split[split] = {r["shape"] for r in recs}
    names = sorted(by_split)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = by_split[a] & by_split[b]
            if overlap:
                problems.append(f"splits {a}/{b} share shapes: {sorted(overlap)[:3]}")

    res = manifest["config"]["resolution"]
    for sid, info in manifest["shapes"].items():
        sdir = root / info["dir"]
        for k in range(cam.N_REFERENCE_VIEWS):
            for sub in ("views", "depth"):
                p = sdir / sub / f"v{k:02d}.pgm"
                if not p.exists():
                    problems.append(f"missing file {p.relative_to(root)}")
        if not (sdir / "poses.json").exists():
            problems.append(f"missing file {info['dir']}/poses.json")

    for split, recs in manifest["samples"].items():
        for r in recs:
            tag = f"{split}/{r['id']}"
            if not (root / r["path"]).exists():
                problems.append(f"{tag}: missing query file {r['path']}")
            has_rec, has_box = r["anomaly"] is not None, r["bbox"] is not None
            if bool(r["label"]) != has_rec or has_rec != has_box:
                problems.append(f"{tag}: label/anomaly/bbox disagree")
            if has_box:
                r0, c0, r1, c1 = r["bbox"]
                if not (0 <= r0 < r1 <= res and 0 <= c0 < c1 <= res):
                    problems.append(f"{tag}: bbox {r['bbox']} invalid for {res}px")
    return problems
