"""Command-line entry point: one subcommand per pipeline stage, declarative
configs (defaults < config file < --key=value flags), and a run manifest
written into every output directory."""

from __future__ import annotations

import csv
import json
import os
import resource
import sys
import tempfile
import time
from typing import Optional

import numpy as np

from . import __version__
from . import analysis, codebook as cb_mod, frames as fr, md as md_mod
from . import model as model_mod, tokenizer as tok_mod, training as tr_mod


class UsageError(ValueError):
    pass


_REQUIRED = object()

_COMMON = {"out": None, "config": None}

_MODEL_KEYS = {
    "hidden_dim": 64,
    "n_layers": 2,
    "intermediate_size": 256,
    "n_heads": 4,
    "precision": "float32",
}

_TRAIN_KEYS = {
    "epochs": 10,
    "batch_size": 16,
    "peak_lr": 3e-4,
    "weight_decay": 0.0,
    "warmup_fraction": 0.05,
    "clip_norm": 1.0,
    "rotation_augment": False,
    "seed": 0,
}

_DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "n_frames": 200,
        "atoms_min": 4,
        "atoms_max": 8,
        "seed": 0,
        "train_frac": 0.8,
        "val_frac": 0.1,
        "test_frac": 0.1,
    },
    "fit-codebook": {
        "data": _REQUIRED,
        "split": "train",
        "pos_joint_bins": 10,
        "pos_1d_bins": 512,
        "force_bins": 4096,
        "energy_bins": 2048,
        "fit_pos_1d": True,
    },
    "tokenize": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "split": "train",
        "mode": "pretrain",
    },
    "pretrain": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "split": "train",
        **_MODEL_KEYS,
        **_TRAIN_KEYS,
    },
    "finetune": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "split": "train",
        "init": None,
        "lambda_energy": 1.0,
        "lambda_force": 1.0,
        **_MODEL_KEYS,
        **_TRAIN_KEYS,
        "weight_decay": 1e-3,
        "warmup_fraction": 0.10,
        "clip_norm": 100.0,
        "epochs": 60,
    },
    "eval": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "checkpoint": _REQUIRED,
        "split": "val",
        "include_ce": False,
    },
    "attn-analyze": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "checkpoint": _REQUIRED,
        "split": "val",
        "n_frames": 20,
        "delta": 0.9,
        "n_quantiles": 10,
    },
    "scaling-fit": {
        "points": _REQUIRED,
        "kind": "power",
        "n_starts": 16,
        "seed": 0,
    },
    "isoflop": {
        "fit": _REQUIRED,
        "budgets": "1e15,1e16,1e17,1e18,1e19",
        "n_min": 1e3,
        "n_max": 1e12,
        "n_grid": 257,
    },
    "logprob": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "checkpoint": _REQUIRED,
        "split": "val",
        "n_frames": 50,
        "noise_sigma": 0.0,
        "seed": 0,
    },
    "md": {
        "provider": "lj",
        "checkpoint": None,
        "codebook": None,
        "conservative": False,
        "data": None,
        "split": "test",
        "frame_index": 0,
        "ensemble": "nve",
        "dt_fs": 1.0,
        "n_steps": 1000,
        "temperature_k": 300.0,
        "friction_per_fs": 0.01,
        "init_temperature_k": 0.0,
        "sample_stride": 10,
        "r_max": 10.0,
        "n_bins": 200,
        "seed": 0,
    },
    "equivariance": {
        "data": _REQUIRED,
        "codebook": _REQUIRED,
        "checkpoint": _REQUIRED,
        "split": "val",
        "n_frames": 10,
        "n_rotations": 20,
        "frame_average": 0,
        "seed": 0,
    },
}


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"--{key} expects a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"--{key} expects an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"--{key} expects a number, got {raw!r}")
    return raw


def _load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    if path.endswith(".toml"):
        import tomllib

        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def parse_config(command: str, argv: list[str]) -> dict:
    """Merge defaults < config file < flags; rejects unknown keys."""
    if command not in _DEFAULTS:
        raise UsageError(f"unknown subcommand {command!r}")
    defaults = {**_COMMON, **_DEFAULTS[command]}
    flags = {}
    for arg in argv:
        if not arg.startswith("--") or "=" not in arg:
            raise UsageError(f"expected --key=value, got {arg!r}")
        key, _, val = arg[2:].partition("=")
        key = key.replace("-", "_")
        if key not in defaults:
            raise UsageError(f"unknown flag --{key} for {command}")
        flags[key] = val
    cfg = dict(defaults)
    config_path = flags.pop("config", None)
    if config_path:
        file_cfg = _load_config_file(config_path)
        for key, val in file_cfg.items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} for {command}")
            cfg[key] = val
        cfg["config"] = config_path
    for key, raw in flags.items():
        ref = defaults[key]
        cfg[key] = raw if ref in (None, _REQUIRED) else _coerce(key, raw, ref)
    missing = [k for k, v in cfg.items() if v is _REQUIRED]
    if missing:
        raise UsageError(
            f"{command}: missing required flag(s): "
            + ", ".join(f"--{k}" for k in missing)
        )
    return cfg


def _run_dir(command: str, cfg: dict) -> str:
    out = cfg.get("out")
    if out is None:
        root = os.environ.get("MOLSEQ_OUT_ROOT", "runs")
        out = os.path.join(root, f"{command}-{time.strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json_atomic(path: str, doc: dict):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, default=_json_default)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_manifest(out: str, command: str, cfg: dict, outputs: list[str], t0: float):
    cfg_snapshot = {k: v for k, v in cfg.items() if k != "out"}
    path_keys = ("data", "codebook", "checkpoint", "init", "points", "fit", "config")
    manifest = {
        "command": command,
        "config": cfg_snapshot,
        "inputs": {k: cfg[k] for k in path_keys if cfg.get(k)},
        "outputs": sorted(outputs),
        "seed": cfg.get("seed"),
        "version": __version__,
        "wall_clock_s": time.time() - t0,
        "peak_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
    }
    _write_json_atomic(os.path.join(out, "manifest.json"), manifest)


def _load_split(cfg: dict, key: str = "data") -> list[fr.MolecularFrame]:
    path = cfg[key]
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = fr.load_manifest(path)
    split = cfg.get("split", "train")
    if split not in manifest["files"]:
        raise UsageError(f"split {split!r} not in dataset manifest {path}")
    xyz_path = manifest["files"][split]
    if not os.path.isabs(xyz_path):
        xyz_path = os.path.join(os.path.dirname(os.path.abspath(path)), xyz_path)
    if not os.path.exists(xyz_path):
        raise FileNotFoundError(f"split file not found: {xyz_path}")
    with open(xyz_path) as fh:
        return fr.parse_xyz(fh.read())


def _load_codebook(cfg: dict) -> cb_mod.QuantileCodebook:
    path = cfg["codebook"]
    if not os.path.exists(path):
        raise FileNotFoundError(f"codebook not found: {path}")
    return cb_mod.load_codebook(path)


def vocab_for_codebook(codebook: cb_mod.QuantileCodebook) -> tok_mod.Vocabulary:
    """Vocabulary whose block sizes match the fitted codebook channels."""
    k = codebook.position_axis_edges[0].n_bins
    return tok_mod.build_vocab(
        n_position_cells=k**3,
        n_energy_bins=(
            codebook.energy_edges.n_bins if codebook.energy_edges is not None else 2048
        ),
        n_force_bins=(
            codebook.force_axis_edges[0].n_bins
            if codebook.force_axis_edges is not None
            else 4096
        ),
    )


def _load_model(cfg: dict, codebook):
    path = cfg["checkpoint"]
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, model_config, _, reference, meta = tr_mod.load_checkpoint(path, codebook)
    return params, model_config, reference, meta


def _write_csv(path: str, fieldnames: list[str], rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _print_table(rows: list[tuple[str, object]]):
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"  {k:<{width}}  {v}")


# ---------------------------------------------------------------------------
# Subcommand implementations. Each returns the list of files it wrote.


def cmd_gen_data(cfg: dict, out: str) -> list[str]:
    rng = np.random.default_rng(cfg["seed"])
    data = fr.generate_lj_dataset(cfg["n_frames"], cfg["atoms_min"], cfg["atoms_max"], rng)
    split = fr.split_dataset(
        len(data), (cfg["train_frac"], cfg["val_frac"], cfg["test_frac"]), rng
    )
    outputs = []
    files = {}
    for name, idx in split.as_dict().items():
        path = os.path.join(out, f"{name}.xyz")
        with open(path, "w") as fh:
            fh.write(fr.write_xyz([data[i] for i in idx]))
        files[name] = f"{name}.xyz"
        outputs.append(path)
    manifest_path = os.path.join(out, "dataset.json")
    fr.write_manifest(
        manifest_path, files, extra={"seed": cfg["seed"], "split": split.as_dict()}
    )
    outputs.append(manifest_path)
    _print_table(
        [(name, len(idx)) for name, idx in split.as_dict().items()]
        + [("manifest", manifest_path)]
    )
    return outputs


def cmd_fit_codebook(cfg: dict, out: str) -> list[str]:
    data = _load_split(cfg)
    codebook = cb_mod.fit_codebook(
        data,
        pos_joint_bins=cfg["pos_joint_bins"],
        pos_1d_bins=cfg["pos_1d_bins"],
        force_bins=cfg["force_bins"],
        energy_bins=cfg["energy_bins"],
        fit_pos_1d=cfg["fit_pos_1d"],
    )
    path = os.path.join(out, "codebook.json")
    cb_mod.save_codebook(codebook, path)
    _print_table(
        [
            ("frames", len(data)),
            ("codebook", path),
            ("hash", cb_mod.codebook_hash(codebook)[:16]),
        ]
    )
    return [path]


def cmd_tokenize(cfg: dict, out: str) -> list[str]:
    data = _load_split(cfg)
    codebook = _load_codebook(cfg)
    vocab = vocab_for_codebook(codebook)
    if cfg["mode"] not in ("pretrain", "finetune"):
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    seqs = [tok_mod.encode_frame(f, codebook, vocab, cfg["mode"]) for f in data]
    path = os.path.join(out, "records.bin")
    tok_mod.write_records(seqs, path)
    _print_table(
        [
            ("sequences", len(seqs)),
            ("vocab_size", vocab.size),
            ("records", path),
        ]
    )
    return [path]


def _train_common(cfg: dict, out: str, stage: str) -> list[str]:
    data = _load_split(cfg)
    codebook = _load_codebook(cfg)
    vocab = vocab_for_codebook(codebook)
    train_cfg = tr_mod.TrainConfig(
        stage=stage,
        peak_lr=cfg["peak_lr"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        warmup_fraction=cfg["warmup_fraction"],
        clip_norm=cfg["clip_norm"],
        seed=cfg["seed"],
        rotation_augment=cfg["rotation_augment"],
        lambda_energy=cfg.get("lambda_energy", 1.0),
        lambda_force=cfg.get("lambda_force", 1.0),
    )
    if stage == "finetune" and cfg.get("init"):
        params, model_config, _, _, _ = tr_mod.load_checkpoint(cfg["init"], codebook)
    else:
        model_config = model_mod.ModelConfig(
            hidden_dim=cfg["hidden_dim"],
            n_layers=cfg["n_layers"],
            intermediate_size=cfg["intermediate_size"],
            n_heads=cfg["n_heads"],
            vocab_size=vocab.size,
            precision=cfg["precision"],
        )
        params = model_mod.init_model(model_config, np.random.default_rng(cfg["seed"]))
    if stage == "pretrain":
        result = tr_mod.pretrain(params, model_config, data, codebook, vocab, train_cfg)
    else:
        result = tr_mod.finetune(params, model_config, data, codebook, vocab, train_cfg)
    ckpt_path = os.path.join(out, "checkpoint.bin")
    tr_mod.save_checkpoint(
        ckpt_path,
        result.params,
        model_config,
        adam=result.adam,
        step=len(result.history),
        codebook=codebook,
        reference=result.reference,
    )
    history_path = os.path.join(out, "history.csv")
    tr_mod.history_to_csv(result.history, history_path)
    total, non_emb = model_mod.count_params(model_config)
    summary = {
        "stage": stage,
        "steps": len(result.history),
        "skipped_steps": result.skipped_steps,
        "final_loss": result.history[-1]["loss"] if result.history else None,
        "params_total": total,
        "params_non_embedding": non_emb,
        "flops_estimate": model_mod.estimate_flops(
            model_config,
            sum(tok_mod.sequence_length(f.n_atoms, stage) for f in data)
            * cfg["epochs"],
        ),
    }
    summary_path = os.path.join(out, "summary.json")
    _write_json_atomic(summary_path, summary)
    _print_table(sorted(summary.items()) + [("checkpoint", ckpt_path)])
    return [ckpt_path, history_path, summary_path]


def cmd_pretrain(cfg: dict, out: str) -> list[str]:
    return _train_common(cfg, out, "pretrain")


def cmd_finetune(cfg: dict, out: str) -> list[str]:
    return _train_common(cfg, out, "finetune")


def cmd_eval(cfg: dict, out: str) -> list[str]:
    data = _load_split(cfg)
    codebook = _load_codebook(cfg)
    vocab = vocab_for_codebook(codebook)
    params, model_config, reference, _ = _load_model(cfg, codebook)
    metrics = tr_mod.evaluate(
        params, model_config, data, codebook, vocab, reference,
        include_ce=cfg["include_ce"],
    )
    path = os.path.join(out, "metrics.json")
    _write_json_atomic(path, metrics)
    _print_table(sorted(metrics.items()))
    return [path]


def cmd_attn_analyze(cfg: dict, out: str) -> list[str]:
    data = _load_split(cfg)[: cfg["n_frames"]]
    codebook = _load_codebook(cfg)
    vocab = vocab_for_codebook(codebook)
    params, model_config, _, _ = _load_model(cfg, codebook)
    records, masses = [], []
    for f in data:
        seq = tok_mod.encode_frame(f, codebook, vocab, "finetune")
        _, record = model_mod.forward_bidirectional(
            params, model_config, seq, capture_attention=True
        )
        records.append(record)
        masses.append(
            analysis.attention_by_token_type(record, analysis.bucket_tokens(seq))
        )
    mean_mass = np.mean([m.fractions for m in masses], axis=0)
    dist_curves = analysis.attention_vs_distance(records, data, cfg["n_quantiles"])
    radius_curves = analysis.radius_vs_density(records, data, cfg["delta"])
    head_curves = analysis.per_head_curves(records, data, cfg["n_quantiles"])
    outputs = []
    mass_path = os.path.join(out, "token_type_mass.json")
    _write_json_atomic(
        mass_path, {"buckets": list(analysis.BUCKETS), "fractions": mean_mass}
    )
    outputs.append(mass_path)
    rows = []
    for layer, curve in enumerate(dist_curves):
        rows += [
            {"curve": "attention_vs_distance", "layer": layer, "head": "", "x": x, "y": y}
            for x, y in zip(curve.x, curve.y)
        ]
    for layer, curve in enumerate(radius_curves):
        rows += [
            {"curve": "radius_vs_density", "layer": layer, "head": "", "x": x, "y": y}
            for x, y in zip(curve.x, curve.y)
        ]
    for (layer, head), curves in head_curves.items():
        for name in ("distance", "rank"):
            rows += [
                {"curve": f"head_{name}", "layer": layer, "head": head, "x": x, "y": y}
                for x, y in zip(curves[name].x, curves[name].y)
            ]
    curves_path = os.path.join(out, "curves.csv")
    _write_csv(curves_path, ["curve", "layer", "head", "x", "y"], rows)
    outputs.append(curves_path)
    _print_table(
        [("frames", len(data)), ("mass", mass_path), ("curves", curves_path)]
    )
    return outputs


def _read_points(path: str) -> list[tuple]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"points file not found: {path}")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"no rows in {path}")
    return rows


def cmd_scaling_fit(cfg: dict, out: str) -> list[str]:
    rows = _read_points(cfg["points"])
    path = os.path.join(out, "fit.json")
    if cfg["kind"] == "power":
        points = [(float(r["n"]), float(r["loss"])) for r in rows]
        fit = analysis.fit_power_law(points)
        doc = {
            "kind": "power",
            "n_c": fit.n_c,
            "alpha": fit.alpha,
            "residuals": fit.residuals,
        }
    elif cfg["kind"] == "joint":
        points = [(float(r["n"]), float(r["d"]), float(r["loss"])) for r in rows]
        fit = analysis.fit_joint_scaling(
            points, n_starts=cfg["n_starts"], seed=cfg["seed"]
        )
        doc = {
            "kind": "joint",
            "l_inf": fit.l_inf,
            "a": fit.a,
            "alpha": fit.alpha,
            "b": fit.b,
            "beta": fit.beta,
            "residual": fit.residual,
        }
    else:
        raise UsageError(f"unknown fit kind {cfg['kind']!r}")
    _write_json_atomic(path, doc)
    _print_table(sorted((k, v) for k, v in doc.items() if not isinstance(v, np.ndarray)))
    return [path]


def cmd_isoflop(cfg: dict, out: str) -> list[str]:
    if not os.path.exists(cfg["fit"]):
        raise FileNotFoundError(f"fit file not found: {cfg['fit']}")
    with open(cfg["fit"]) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "joint":
        raise UsageError("isoflop requires a joint scaling fit")
    fit = analysis.JointScalingFit(
        l_inf=doc["l_inf"], a=doc["a"], alpha=doc["alpha"],
        b=doc["b"], beta=doc["beta"], residual=doc.get("residual", 0.0),
    )
    budgets = [float(b) for b in str(cfg["budgets"]).split(",") if b]
    rows, optima = [], []
    for budget in budgets:
        ns, losses, n_opt, loss_opt = analysis.isoflop_curve(
            fit, budget, n_min=cfg["n_min"], n_max=cfg["n_max"], n_grid=cfg["n_grid"]
        )
        rows += [
            {"budget": budget, "n": n, "loss": l} for n, l in zip(ns, losses)
        ]
        optima.append({"budget": budget, "n_opt": n_opt, "loss_opt": loss_opt})
    curves_path = os.path.join(out, "isoflop.csv")
    _write_csv(curves_path, ["budget", "n", "loss"], rows)
    optima_path = os.path.join(out, "optima.json")
    _write_json_atomic(optima_path, {"optima": optima})
    _print_table([(f"{o['budget']:.3g}", f"N* = {o['n_opt']:.4g}") for o in optima])
    return [curves_path, optima_path]


def cmd_logprob(cfg: dict, out: str) -> list[str]:
    data = _load_split(cfg)[: cfg["n_frames"]]
    codebook = _load_codebook(cfg)
    vocab = vocab_for_codebook(codebook)
    params, model_config, _, _ = _load_model(cfg, codebook)
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for i, f in enumerate(data):
        if cfg["noise_sigma"] > 0:
            noisy = fr.MolecularFrame(
                atomic_numbers=list(f.atomic_numbers),
                positions=f.positions
                + cfg["noise_sigma"] * rng.standard_normal(f.positions.shape),
                forces=f.forces,
                energy=f.energy,
                charge=f.charge,
                spin=f.spin,
            )
            f = noisy
        seq = tok_mod.encode_frame(f, codebook, vocab, "pretrain")
        rows.append(
            {
                "frame": i,
                "n_atoms": f.n_atoms,
                "log_prob": analysis.sequence_log_prob(params, model_config, seq),
            }
        )
    path = os.path.join(out, "logprobs.csv")
    _write_csv(path, ["frame", "n_atoms", "log_prob"], rows)
    mean = float(np.mean([r["log_prob"] for r in rows]))
    summary_path = os.path.join(out, "summary.json")
    _write_json_atomic(
        summary_path,
        {"mean_log_prob": mean, "n_frames": len(rows), "noise_sigma": cfg["noise_sigma"]},
    )
    _print_table([("frames", len(rows)), ("mean_log_prob", mean)])
    return [path, summary_path]


def cmd_md(cfg: dict, out: str) -> list[str]:
    rng = np.random.default_rng(cfg["seed"])
    if cfg["data"]:
        data = _load_split(cfg)
        if not 0 <= cfg["frame_index"] < len(data):
            raise UsageError(f"frame_index {cfg['frame_index']} out of range")
        frame = data[cfg["frame_index"]]
    else:
        frame = fr.generate_lj_dataset(1, 4, 4, rng)[0]
    if cfg["provider"] == "lj":
        provider = md_mod.lj_provider
    elif cfg["provider"] == "model":
        if not cfg["checkpoint"] or not cfg["codebook"]:
            raise UsageError("provider=model requires --checkpoint and --codebook")
        codebook = _load_codebook(cfg)
        vocab = vocab_for_codebook(codebook)
        params, model_config, reference, _ = _load_model(cfg, codebook)
        provider = md_mod.model_provider(
            params, model_config, codebook, vocab, reference,
            conservative=cfg["conservative"],
        )
    else:
        raise UsageError(f"unknown provider {cfg['provider']!r}")
    state = md_mod.initial_state(frame, cfg["init_temperature_k"], rng)
    if cfg["ensemble"] == "nve":
        traj = md_mod.run_nve(
            state, provider, cfg["dt_fs"], cfg["n_steps"], cfg["sample_stride"]
        )
    elif cfg["ensemble"] == "nvt":
        traj = md_mod.run_nvt(
            state, provider, cfg["dt_fs"], cfg["n_steps"],
            cfg["temperature_k"], cfg["friction_per_fs"], rng, cfg["sample_stride"],
        )
    else:
        raise UsageError(f"unknown ensemble {cfg['ensemble']!r}")
    outputs = []
    traj_path = os.path.join(out, "trajectory.xyz")
    traj_frames = [
        fr.MolecularFrame(
            atomic_numbers=list(traj.elements), positions=p, energy=e
        )
        for p, e in zip(traj.positions, traj.potential_energies)
    ]
    with open(traj_path, "w") as fh:
        fh.write(fr.write_xyz(traj_frames))
    outputs.append(traj_path)
    centers, masses = md_mod.h_of_r(traj, cfg["r_max"], cfg["n_bins"])
    h_path = os.path.join(out, "h_of_r.csv")
    _write_csv(
        h_path, ["r", "mass"], [{"r": r, "mass": m} for r, m in zip(centers, masses)]
    )
    outputs.append(h_path)
    summary = {
        "ensemble": cfg["ensemble"],
        "provider": cfg["provider"],
        "n_samples": traj.n_samples,
        "unstable": traj.unstable,
        "energy_drift": md_mod.energy_drift(traj) if traj.n_samples else None,
        "mean_kinetic_energy": float(np.mean(traj.kinetic_energies))
        if traj.n_samples
        else None,
    }
    summary_path = os.path.join(out, "summary.json")
    _write_json_atomic(summary_path, summary)
    outputs.append(summary_path)
    _print_table(sorted(summary.items()))
    return outputs


def cmd_equivariance(cfg: dict, out: str) -> list[str]:
    data = _load_split(cfg)[: cfg["n_frames"]]
    codebook = _load_codebook(cfg)
    vocab = vocab_for_codebook(codebook)
    params, model_config, reference, _ = _load_model(cfg, codebook)

    def force_fn(frame):
        seq = tok_mod.encode_frame(frame, codebook, vocab, "finetune")
        _, forces = model_mod.predict_energy_forces(params, model_config, seq)
        return forces

    fn = force_fn
    if cfg["frame_average"] > 0:
        fn = analysis.make_frame_averaged(force_fn, cfg["frame_average"], cfg["seed"])
    rows = []
    rng = np.random.default_rng(cfg["seed"])
    for i, frame in enumerate(data):
        sim, excluded = analysis.equivariance_cossim(
            fn, frame, cfg["n_rotations"], rng
        )
        rows.append({"frame": i, "cossim": sim, "excluded": excluded})
    path = os.path.join(out, "equivariance.csv")
    _write_csv(path, ["frame", "cossim", "excluded"], rows)
    mean = float(np.nanmean([r["cossim"] for r in rows]))
    summary_path = os.path.join(out, "summary.json")
    _write_json_atomic(
        summary_path,
        {
            "mean_cossim": mean,
            "n_frames": len(rows),
            "n_rotations": cfg["n_rotations"],
            "frame_average": cfg["frame_average"],
        },
    )
    _print_table([("frames", len(rows)), ("mean_cossim", mean)])
    return [path, summary_path]


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-codebook": cmd_fit_codebook,
    "tokenize": cmd_tokenize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "attn-analyze": cmd_attn_analyze,
    "scaling-fit": cmd_scaling_fit,
    "isoflop": cmd_isoflop,
    "logprob": cmd_logprob,
    "md": cmd_md,
    "equivariance": cmd_equivariance,
}


def _usage() -> str:
    return (
        "usage: molseq <subcommand> [--config=FILE] [--key=value ...]\n"
        "subcommands: " + " | ".join(_COMMANDS) + "\n"
        "config precedence: defaults < config file < flags"
    )


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(_usage())
        return 0
    command, rest = argv[0], argv[1:]
    try:
        cfg = parse_config(command, rest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_usage(), file=sys.stderr)
        return 1
    t0 = time.time()
    out = _run_dir(command, cfg)
    try:
        outputs = _COMMANDS[command](cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _write_manifest(out, command, cfg, outputs, t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
