"""Command-line workflows around the registration toolkit.

Subcommands cover preprocessing (convert), descriptor extraction (features),
rigid/affine/probe registration with local or global search (register),
similarity heatmaps for inspection (heatmap), training-pair generation
(sample-pairs), and metric evaluation (evaluate).

Angles cross the CLI boundary in degrees; JSON output stays in radians and
millimetres with labeled keys. Reports embed the seed, tool version, and
input hashes so a run can be reproduced from its report alone. Exit codes:
0 success, 2 usage, 3 bad data, 4 numerical failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
import time

import click
import numpy as np

from . import __version__, cnn_infer
from .errors import DataError, NumericalError
from .eval import (convergence_buckets, dice, fre, fre_percentiles, hd95,
                   LabelVolume, load_landmarks)
from .features import FeatureMap, heatmap, load_features, quantize, save_features
from .metrics import mind_ssc, weight_map
from .optim import (SearchRanges, bfgs_minimize, derivative_free_minimize,
                    global_search, make_registration_objective)
from .sampling import read_dataset, sample_pairs, write_dataset
from .transform import (AFFINE, AffineParams, ProbeDeform, RIGID, RIGID_PROBE,
                        RigidParams, TransformChain, euler_from_matrix,
                        rotation_matrix)
from .volume import Volume, normalize, read_any, resample, write_any

SIMILARITIES = ("disa", "lc2", "mind")
MODES = (RIGID, AFFINE, RIGID_PROBE)


def _guarded(f):
    """Map toolkit exceptions onto the documented exit codes."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except DataError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)
        except NumericalError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(4)

    return wrapper


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _parse_config(path) -> dict:
    """Flat key = value file; ints, floats, and comma-separated floats."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise DataError(f"{path}:{ln}: expected key = value")
            key, _, raw = s.partition("=")
            key, raw = key.strip(), raw.strip().strip('"')
            try:
                out[key] = int(raw)
                continue
            except ValueError:
                pass
            try:
                out[key] = float(raw)
                continue
            except ValueError:
                pass
            if "," in raw:
                try:
                    out[key] = [float(p) for p in raw.split(",")]
                    continue
                except ValueError:
                    pass
            out[key] = raw
    return out


def _probe_from_config(cfg: dict) -> ProbeDeform:
    try:
        center = cfg["probe_center"]
        r, big_r = cfg["probe_r"], cfg["probe_R"]
    except KeyError as e:
        raise DataError(f"probe mode needs {e.args[0]} in the config file") from None
    return ProbeDeform(np.asarray(center, dtype=np.float64), float(r),
                       float(big_r), float(cfg.get("probe_alpha", 0.0)),
                       float(cfg.get("probe_beta", 0.0)))


# ---- transform JSON ----------------------------------------------------------


def chain_to_json(chain: TransformChain) -> dict:
    """Homogeneous world matrix plus the probe deformation, if any."""
    if chain.mode == AFFINE:
        lin = chain.linear.matrix3
    else:
        lin = rotation_matrix(chain.linear.rotation)
    c, t = chain.linear.center, chain.linear.translation
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = c + t - lin @ c
    out = {"mode": chain.mode, "matrix": [float(v) for v in m.ravel()]}
    if chain.deform is not None:
        d = chain.deform
        out["deform"] = {"c": [float(v) for v in d.center], "r": float(d.r),
                         "R": float(d.R), "alpha": float(d.alpha),
                         "beta": float(d.beta)}
    return out


def chain_from_json(doc: dict) -> TransformChain:
    try:
        mode = doc["mode"]
        m = np.asarray(doc["matrix"], dtype=np.float64).reshape(4, 4)
    except (KeyError, TypeError, ValueError):
        raise DataError("transform JSON needs mode and a 16-number matrix") from None
    if mode not in MODES:
        raise DataError(f"unknown transform mode {mode!r}")
    lin, t = m[:3, :3], m[:3, 3]
    if mode == AFFINE:
        return TransformChain(AFFINE, AffineParams(matrix3=lin, translation=t,
                                                   center=np.zeros(3)))
    rigid = RigidParams(rotation=euler_from_matrix(lin), translation=t,
                        center=np.zeros(3))
    if mode == RIGID:
        return TransformChain(RIGID, rigid)
    d = doc.get("deform")
    if d is None:
        raise DataError("rigid+probe transform JSON needs a deform block")
    deform = ProbeDeform(np.asarray(d["c"], dtype=np.float64), float(d["r"]),
                         float(d["R"]), float(d["alpha"]), float(d["beta"]))
    return TransformChain(RIGID_PROBE, rigid, deform)


def save_transform(chain: TransformChain, path) -> None:
    with open(path, "w") as fh:
        json.dump(chain_to_json(chain), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_transform(path) -> TransformChain:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: {e}") from None
    return chain_from_json(doc)


# ---- commands ----------------------------------------------------------------


@click.group()
@click.version_option(__version__, prog_name="disareg")
@click.option("--threads", type=int, default=None,
              help="Worker-thread cap for compiled kernels.")
def main(threads):
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be >= 1")
        import numba
        numba.set_num_threads(threads)


@main.command("convert")
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("dst", type=click.Path(dir_okay=False))
@click.option("--spacing", type=float, default=None,
              help="Resample to this isotropic spacing (mm).")
@click.option("--normalize", "do_normalize", is_flag=True,
              help="Shift/scale to zero mean, unit deviation.")
@_guarded
def cmd_convert(src, dst, spacing, do_normalize):
    """Read NIfTI or DISAV1, preprocess, write the result."""
    v = read_any(src)
    if spacing is not None:
        v = resample(v, (spacing, spacing, spacing))
    if do_normalize:
        v = normalize(v)
    write_any(v, dst)
    click.echo(f"wrote {dst}: dims {v.dims}, spacing "
               f"{tuple(round(s, 6) for s in v.spacing)}")


def _ensure_normalized(v: Volume) -> Volume:
    data = v.data.astype(np.float64)
    if abs(data.mean()) < 1e-3 and abs(data.std() - 1.0) < 1e-3:
        return v
    return normalize(v)


@main.command("features")
@click.argument("volume_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("weights_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--quantize", "do_quantize", is_flag=True,
              help="Store int8 descriptors (scale 127) instead of float32.")
@_guarded
def cmd_features(volume_path, weights_path, out, do_quantize):
    """One forward pass: volume + DISAW1 network -> DISAF1 descriptor grid."""
    v = _ensure_normalized(read_any(volume_path))
    net = cnn_infer.load_weights(weights_path)
    fmap = cnn_infer.infer(net, v)
    if do_quantize:
        fmap = quantize(fmap)
    save_features(fmap, out)
    click.echo(f"wrote {out}: cells {fmap.dims}, stride {fmap.stride}, "
               f"{'int8' if fmap.is_quantized else 'float32'}")


def _load_disa_input(path, weights_path):
    if str(path).endswith(".disaf1"):
        return load_features(path)
    if weights_path is None:
        raise click.UsageError("disa with volume inputs needs --weights")
    net = cnn_infer.load_weights(weights_path)
    return cnn_infer.infer(net, _ensure_normalized(read_any(path)))


def _feature_center(f: FeatureMap) -> np.ndarray:
    half = (np.array(f.source_dims, dtype=np.float64) - 1.0) / 2.0
    return (half * f.spacing) @ f.direction.T + f.origin


def _volume_center(v: Volume) -> np.ndarray:
    return v.world_from_index((np.array(v.dims, dtype=np.float64) - 1.0) / 2.0)


def _search_box(obj, mode, rot_rad, trans_mm) -> SearchRanges:
    u0 = obj.start_params
    if mode == AFFINE:
        # matrix entries move like small angles, so share the rotation width
        width = np.array([rot_rad] * 9 + [trans_mm / 100.0] * 3)
    else:
        width = np.array([rot_rad] * 3 + [trans_mm / 100.0] * 3)
    lower, upper = u0[:len(width)] - width, u0[:len(width)] + width
    if mode == RIGID_PROBE:
        # scaled alpha and beta both live on [0, 1]
        lower = np.concatenate([lower, [0.0, 0.0]])
        upper = np.concatenate([upper, [1.0, 1.0]])
    return SearchRanges(lower, upper)


@main.command("register")
@click.argument("fixed", type=click.Path(exists=True, dir_okay=False))
@click.argument("moving", type=click.Path(exists=True, dir_okay=False))
@click.option("--similarity", type=click.Choice(SIMILARITIES), default="disa")
@click.option("--mode", type=click.Choice(MODES), default=RIGID)
@click.option("--search", type=click.Choice(["local", "global"]), default="local")
@click.option("--rot-range", type=float, default=10.0, help="Degrees.")
@click.option("--trans-range", type=float, default=25.0, help="Millimetres.")
@click.option("--n-starts", type=int, default=500)
@click.option("--seed", type=int, default=0)
@click.option("--weights", "weights_path", type=click.Path(exists=True),
              default=None, help="DISAW1 network when disa inputs are volumes.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="key = value file: probe geometry, optimizer.")
@click.option("--sample-step", type=int, default=2,
              help="Fixed-grid stride for lc2 and mind evaluation.")
@click.option("--allow-global-lc2", is_flag=True,
              help="Run the refused lc2+global combination anyway.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False),
              default=None)
@click.option("--fixed-landmarks", type=click.Path(exists=True), default=None)
@click.option("--moving-landmarks", type=click.Path(exists=True), default=None)
@_guarded
def cmd_register(fixed, moving, similarity, mode, search, rot_range, trans_range,
                 n_starts, seed, weights_path, config_path, sample_step,
                 allow_global_lc2, out_path, report_path, fixed_landmarks,
                 moving_landmarks):
    """Estimate the transform mapping fixed-volume points into the moving one."""
    if similarity == "lc2" and search == "global" and not allow_global_lc2:
        raise click.UsageError(
            "lc2 with global search exceeds any sane evaluation budget; "
            "pass --allow-global-lc2 to run it anyway")
    cfg = _parse_config(config_path) if config_path else {}
    probe = _probe_from_config(cfg) if mode == RIGID_PROBE else None
    t0 = time.perf_counter()

    if similarity == "disa":
        f_fixed = _load_disa_input(fixed, weights_path)
        f_moving = _load_disa_input(moving, weights_path)
        obj = make_registration_objective("disa", f_fixed, f_moving, mode=mode,
                                          center=_feature_center(f_fixed),
                                          probe=probe, seed=seed)
    elif similarity == "lc2":
        vf, vm = read_any(fixed), read_any(moving)
        obj = make_registration_objective("lc2", vf, vm, mode=mode,
                                          center=_volume_center(vf),
                                          sample_grid_step=sample_step,
                                          probe=probe)
    else:
        vf, vm = read_any(fixed), read_any(moving)
        obj = make_registration_objective("mind", mind_ssc(vf), mind_ssc(vm),
                                          mode=mode, center=_volume_center(vf),
                                          sample_grid_step=sample_step,
                                          probe=probe)

    rot_rad = np.deg2rad(rot_range)
    ranges = _search_box(obj, mode, rot_rad, trans_range)
    u0 = obj.start_params
    initial = -obj.value(u0)

    max_iters = int(cfg.get("max_iters", 100))
    grad_tol = float(cfg.get("grad_tol", 1e-6))
    per_start = int(cfg.get("per_start_evals", 60))
    max_evals = int(cfg.get("max_evals", 200))

    if search == "local":
        if obj.has_gradient:
            res = bfgs_minimize(obj.value_and_grad, u0, max_iters=max_iters,
                                grad_tol=grad_tol)
        else:
            res = derivative_free_minimize(obj.value, u0, ranges.lower,
                                           ranges.upper, max_evals=max_evals)
        n_evals, n_grad = res.n_evals, res.n_grad_evals
    else:
        res = global_search(obj, ranges, n_starts=n_starts, seed=seed,
                            per_start_evals=per_start)
        n_evals, n_grad = res.n_evals, res.n_grad_evals
        if obj.has_gradient:
            polish = bfgs_minimize(obj.value_and_grad, res.x,
                                   max_iters=max_iters, grad_tol=grad_tol)
            if polish.value < res.value:
                res = polish
            n_evals += polish.n_evals
            n_grad += polish.n_grad_evals

    chain = obj.chain_from(res.x)
    save_transform(chain, out_path)
    elapsed = time.perf_counter() - t0

    report = {
        "version": __version__,
        "seed": seed,
        "similarity": similarity,
        "mode": mode,
        "search": search,
        "rot_range_rad": float(rot_rad),
        "trans_range_mm": float(trans_range),
        "inputs": {
            "fixed": {"path": str(fixed), "sha256": _sha256(fixed)},
            "moving": {"path": str(moving), "sha256": _sha256(moving)},
        },
        "initial_objective": float(initial),
        "final_objective": float(-res.value),
        "n_evals": int(n_evals),
        "n_grad_evals": int(n_grad),
        "converged": bool(res.converged),
        "transform": chain_to_json(chain),
        "wall_time_s": round(elapsed, 3),
    }
    if fixed_landmarks and moving_landmarks:
        report["fre_mm"] = fre(load_landmarks(fixed_landmarks),
                               load_landmarks(moving_landmarks), chain)
    if report_path:
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    click.echo(f"objective {initial:.6f} -> {-res.value:.6f} in {n_evals} "
               f"evaluations ({elapsed:.2f}s); transform -> {out_path}")


@main.command("heatmap")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("x", type=float)
@click.argument("y", type=float)
@click.argument("z", type=float)
@click.argument("target", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@_guarded
def cmd_heatmap(source, x, y, z, target, out):
    """Similarity of the source descriptor at a world point to every target cell."""
    f_src = load_features(source)
    f_tgt = load_features(target)
    cell = np.rint(f_src.world_to_cell(np.array([x, y, z]))).astype(int)
    nx, ny, nz = f_src.dims
    if np.any(cell < 0) or np.any(cell >= [nx, ny, nz]):
        raise DataError(f"point ({x}, {y}, {z}) mm is outside the source grid")
    vol = heatmap(f_src, cell, f_tgt)
    write_any(vol, out)
    click.echo(f"wrote {out}: query cell {tuple(int(c) for c in cell)}, "
               f"peak {float(vol.data.max()):.4f}")


@main.command("sample-pairs")
@click.argument("moving", type=click.Path(exists=True, dir_okay=False))
@click.argument("fixed", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--n", type=int, default=5000)
@click.option("--stride", type=int, default=2, help="Candidate-grid stride.")
@click.option("--seed", type=int, default=0)
@click.option("--gradient-side", type=click.Choice(["auto", "moving", "fixed"]),
              default="auto")
@_guarded
def cmd_sample_pairs(moving, fixed, out, n, stride, seed, gradient_side):
    """Generate LC2-supervised patch pairs and write a DISAP1 dataset."""
    run = sample_pairs(read_any(moving), read_any(fixed), n=n,
                       candidate_stride=stride, seed=seed,
                       gradient_side=gradient_side)
    write_dataset(run, out)
    targets = [r.target for r in run]
    click.echo(f"wrote {out}: {len(run)} records, gradient side "
               f"{run.gradient_side}, target range "
               f"[{min(targets):.3f}, {max(targets):.3f}]")


def _label_volume(path) -> LabelVolume:
    v = read_any(path)
    data = np.rint(v.data).astype(np.int32)
    if np.any(np.abs(v.data - data) > 1e-3):
        raise DataError(f"{path}: voxel values are not integer labels")
    return LabelVolume(data, v.spacing, v.origin, v.direction,
                       int(data.max()) if data.size else 0)


@main.command("evaluate")
@click.option("--case", "cases", multiple=True,
              help="FIXED_LMS:MOVING_LMS:TRANSFORM_JSON, repeatable.")
@click.option("--labels", "labels", multiple=True,
              help="VOLUME_A:VOLUME_B:LABEL, repeatable.")
@click.option("--threshold", type=float, default=15.0,
              help="Converged-case FRE threshold (mm).")
@click.option("--initial", "initial_path", type=click.Path(exists=True),
              default=None,
              help="JSON list of per-case initial FREs for bucketing.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False),
              default=None)
@_guarded
def cmd_evaluate(cases, labels, threshold, initial_path, report_path):
    """Landmark and label-overlap metrics, per case and aggregated."""
    if not cases and not labels:
        raise click.UsageError("nothing to evaluate: pass --case or --labels")
    doc = {"cases": [], "labels": []}
    fres = []
    for spec_str in cases:
        parts = spec_str.split(":")
        if len(parts) != 3:
            raise DataError(f"--case wants three :-separated paths, got {spec_str!r}")
        f_lms, m_lms, t_path = parts
        value = fre(load_landmarks(f_lms), load_landmarks(m_lms),
                    load_transform(t_path))
        fres.append(value)
        doc["cases"].append({"fixed_landmarks": f_lms, "moving_landmarks": m_lms,
                             "transform": t_path, "fre_mm": value})
    if fres:
        doc["aggregate"] = fre_percentiles(fres)
    for spec_str in labels:
        parts = spec_str.split(":")
        if len(parts) != 3:
            raise DataError(f"--labels wants A:B:LABEL, got {spec_str!r}")
        a, b = _label_volume(parts[0]), _label_volume(parts[1])
        label = int(parts[2])
        doc["labels"].append({"a": parts[0], "b": parts[1], "label": label,
                              "dice": dice(a, b, label),
                              "hd95_mm": hd95(a, b, label)})
    if initial_path and fres:
        with open(initial_path) as fh:
            init = json.load(fh)
        doc["buckets"] = [b._asdict() for b in
                          convergence_buckets(init, fres, threshold=threshold)]
    text = json.dumps(doc, indent=2, sort_keys=True)
    if report_path:
        with open(report_path, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


if __name__ == "__main__":
    main()
