"""High-level operations: evaluate, ablate, benchmark, and the gradient suite.

These are the service-facing entry points; each returns a plain dict that
serializes cleanly to JSON.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .attention import AttentionConfig, TransformerLayer
from .audio import AudioFrontend, AudioFrontendConfig, SpeechFeatures
from .config import PipelineConfig
from .data import DatasetRecord, default_masks, split_records, subjects
from .decoder import ARRANGEMENTS, DecoderConfig
from .errors import ConfigError, ContractError
from .gradcheck import max_grad_error
from .metrics import VertexMask, fdd, lve
from .model import SpeechMotionModel
from .moe import MoeConfig, MoeLayer, MoeMambaLayer
from .ssm import MambaLayer, SsmConfig
from .tensor import Tensor
from .training import TrainConfig, TrainResult, train_model

LVE_UNIT_SCALE = 1e3   # report LVE in units of 1e-3 mm
FDD_UNIT_SCALE = 1e5   # report FDD in units of 1e-5 mm

ARRANGEMENT_ORDER = ["M-MoE", "MoE-MoE", "M-M", "MoE-M"]


def check_model_matches_records(cfg: PipelineConfig,
                                records: list[DatasetRecord]) -> None:
    if not records:
        return
    v = records[0].n_vertices
    if cfg.model.vertex_count != v:
        raise ConfigError(
            f"model.vertex_count={cfg.model.vertex_count} but dataset has "
            f"{v} vertices; set model.vertex_count={v}")
    n_subj = len(subjects(records))
    if cfg.model.n_subjects < n_subj:
        raise ConfigError(
            f"model.n_subjects={cfg.model.n_subjects} but dataset has "
            f"{n_subj} subjects")
    feat_dims = {r.audio.frames.shape[1] for r in records
                 if isinstance(r.audio, SpeechFeatures)}
    if feat_dims and feat_dims != {cfg.audio.feature_dim}:
        raise ConfigError(
            f"audio.feature_dim={cfg.audio.feature_dim} but dataset features "
            f"have width {sorted(feat_dims)}")


def evaluate_model(model: SpeechMotionModel, records: list[DatasetRecord],
                   mask: VertexMask, mode: str = "autoregressive") -> dict:
    """Per-sequence LVE/FDD plus dataset means, in the units of the tables
    (LVE x 1e-3 mm, FDD x 1e-5 mm)."""
    if mode not in ("autoregressive", "teacher_forced"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if not records:
        raise ContractError("evaluation requires at least one sequence")
    rows = []
    for record in records:
        if mode == "autoregressive":
            pred = model.generate(record.audio, record.subject_id,
                                  record.n_frames, fps=record.motion.fps).frames
        else:
            pred = model.teacher_forced(record.audio, record.motion.frames,
                                        record.subject_id).data
        gt = record.motion.frames
        zero = np.zeros_like(gt)
        rows.append({
            "sequence_id": record.record_id,
            "split": record.split,
            "lve_mm": lve(pred, gt, mask),
            "lve_sq_mm2": lve(pred, gt, mask, squared=True),
            "fdd_mm": fdd(pred, gt, mask),
            "abs_fdd_mm": abs(fdd(pred, gt, mask)),
            "baseline_zero_lve_mm": lve(zero, gt, mask),
        })
    mean = {key: float(np.mean([r[key] for r in rows]))
            for key in ("lve_mm", "lve_sq_mm2", "fdd_mm", "abs_fdd_mm",
                        "baseline_zero_lve_mm")}
    return {
        "mode": mode,
        "n_sequences": len(rows),
        "sequences": rows,
        "mean": mean,
        "table": {
            "lve": mean["lve_mm"] * LVE_UNIT_SCALE,
            "fdd": mean["fdd_mm"] * FDD_UNIT_SCALE,
            "units": {"lve": "1e-3 mm", "fdd": "1e-5 mm"},
        },
    }


def mask_from_config(records: list[DatasetRecord],
                     lip_indices: list[int] | None,
                     upper_indices: list[int] | None) -> VertexMask:
    """Use provided index sets, falling back to the synthetic-mesh convention."""
    if lip_indices is None or upper_indices is None:
        conv = default_masks(records[0].n_vertices)
        lip_indices = conv["lips"] if lip_indices is None else lip_indices
        upper_indices = conv["upper"] if upper_indices is None else upper_indices
    return VertexMask(lip_indices=list(lip_indices), upper_indices=list(upper_indices))


def train_pipeline(cfg: PipelineConfig, records: list[DatasetRecord]) -> tuple[SpeechMotionModel, TrainResult]:
    check_model_matches_records(cfg, records)
    model = cfg.build_model()
    result = train_model(model, split_records(records, "train"), cfg.train,
                         seed=cfg.seed, val_records=split_records(records, "val"))
    return model, result


def ablate(cfg: PipelineConfig, records: list[DatasetRecord],
           mask: VertexMask, eval_split: str = "test") -> dict:
    """Train and evaluate all four layer arrangements from one seed.

    Rows share the data order and every non-arrangement-specific initial
    weight; only the arrangement field differs across row configs. A failing
    row is annotated rather than aborting the table.
    """
    rows = []
    for arrangement in ARRANGEMENT_ORDER:
        row_cfg = PipelineConfig(
            seed=cfg.seed,
            model=dataclasses.replace(cfg.model, arrangement=arrangement),
            audio=dataclasses.replace(cfg.audio),
            train=dataclasses.replace(cfg.train),
        )
        try:
            model, result = train_pipeline(row_cfg, records)
            eval_records = split_records(records, eval_split) or records
            report = evaluate_model(model, eval_records, mask)
            rows.append({
                "arrangement": arrangement,
                "lve": report["table"]["lve"],
                "fdd": report["table"]["fdd"],
                "epoch_time_s": result.mean_epoch_time,
                "steps": result.steps,
                "final_train_loss": result.final_loss,
            })
        except Exception as exc:  # partial table with failure annotation
            rows.append({"arrangement": arrangement, "error": str(exc)})
    return {
        "rows": rows,
        "units": {"lve": "1e-3 mm", "fdd": "1e-5 mm",
                  "epoch_time_s": "seconds"},
        "eval_split": eval_split,
        "ppe_period": cfg.model.ppe_period,
    }


def moe_parameter_audit(model: SpeechMotionModel) -> list[dict]:
    audit = []
    for i, layer in enumerate(model.decoder.layers):
        moe: MoeLayer | None = getattr(layer, "moe", None)
        if moe is None:
            continue
        per_expert = moe.experts[0].parameter_count()
        audit.append({
            "layer": i,
            "router_params": int(moe.router.size),
            "per_expert_params": int(per_expert),
            "top_k": moe.config.top_k,
            "n_experts": moe.config.n_experts,
            "active_params": int(moe.active_parameter_count()),
            "total_params": int(moe.parameter_count()),
        })
    return audit


def run_benchmark(cfg: PipelineConfig, seq_lengths: list[int],
                  warmup_steps: int = 3) -> dict:
    """Incremental-decode throughput and decode-state memory by length."""
    if len(seq_lengths) < 2:
        raise ConfigError("benchmark needs at least 2 sequence lengths")
    model = cfg.build_model()
    feat_rng = np.random.default_rng([cfg.seed, 1234])
    attn_cfg = cfg.model.attention_config()
    per_token_kv = (2 * attn_cfg.n_kv_groups * attn_cfg.head_dim
                    * np.dtype(np.float64).itemsize)
    results = []
    for length in sorted(int(x) for x in seq_lengths):
        feats = SpeechFeatures(
            frames=feat_rng.normal(size=(max(2 * length, 2), cfg.audio.feature_dim)),
            source_rate=60.0)
        session = model.open_session(feats, 0, n_frames=length)
        for _ in range(min(warmup_steps, length)):
            session.decode_step()
        remaining = length - min(warmup_steps, length)
        t0 = time.perf_counter()
        for _ in range(remaining):
            session.decode_step()
        elapsed = time.perf_counter() - t0
        timed = remaining if remaining else length
        state = session.state_bytes()
        results.append({
            "seq_length": length,
            "tokens_per_sec": timed / elapsed if elapsed > 0 else float("inf"),
            **state,
            "kv_bytes_per_token": state["kv_cache_bytes"] / length,
        })
    return {
        "lengths": results,
        "kv_bytes_per_token_expected": per_token_kv,
        "total_params": model.total_parameter_count(),
        "active_params": model.active_parameter_count(),
        "moe_audit": moe_parameter_audit(model),
    }


GRADCHECK_TOLERANCE = 1e-4


def gradcheck_suite(seed: int = 0, coords_per_param: int = 4) -> dict:
    """Finite-difference pass over every block type plus the full toy decoder."""
    rng = np.random.default_rng([seed, 77])
    checks = []

    def run(component: str, module, make_loss):
        err = max_grad_error(module, make_loss, rng,
                             coords_per_param=coords_per_param)
        checks.append({"component": component, "max_rel_error": err,
                       "tolerance": GRADCHECK_TOLERANCE,
                       "passed": bool(err < GRADCHECK_TOLERANCE)})

    mamba = MambaLayer(SsmConfig(d_model=6, d_state=4), rng)
    x1 = rng.normal(size=(1, 5, 6))
    run("mamba_block", mamba, lambda: (mamba(Tensor(x1)) ** 2.0).sum())

    moe = MoeMambaLayer(SsmConfig(d_model=6, d_state=4),
                        MoeConfig(n_experts=3, top_k=2, d_ff=12), rng)
    x2 = rng.normal(size=(1, 4, 6))
    run("moe_block", moe, lambda: (moe(Tensor(x2)) ** 2.0).sum())

    tl = TransformerLayer(
        AttentionConfig(d_model=8, n_query_heads=2, n_kv_groups=1, d_ff=16), rng)
    x3 = rng.normal(size=(1, 4, 8))
    run("transformer_block", tl, lambda: (tl(Tensor(x3)) ** 2.0).sum())

    from .audio import ConvSpec, Waveform
    frontend = AudioFrontend(AudioFrontendConfig(
        d_model=8, feature_dim=5,
        convs=[ConvSpec(kernel=6, stride=3, channels=4),
               ConvSpec(kernel=3, stride=2, channels=5)]), rng)
    wave = Waveform(samples=rng.normal(size=60), sample_rate=16000)
    run("audio_frontend", frontend,
        lambda: (frontend.tokens_from_waveform(wave, 5) ** 2.0).sum())

    toy_cfg = DecoderConfig(vertex_count=12, n_subjects=2, d_model=16,
                            arrangement="M-MoE", n_query_heads=4, n_kv_groups=2)
    toy = SpeechMotionModel(
        toy_cfg,
        AudioFrontendConfig(d_model=16, feature_dim=5,
                            convs=[ConvSpec(kernel=6, stride=3, channels=4),
                                   ConvSpec(kernel=3, stride=2, channels=5)]),
        seed=seed)
    toy.decoder.head.weight.data = rng.normal(
        0.0, 0.05, size=toy.decoder.head.weight.shape)
    gt = rng.normal(size=(4, 12, 3))
    wave2 = Waveform(samples=rng.normal(size=80), sample_rate=16000)

    def toy_loss():
        pred = toy.teacher_forced(wave2, gt, 1)
        return ((pred - Tensor(gt)) ** 2.0).mean()

    run("full_toy_decoder", toy, toy_loss)

    return {
        "checks": checks,
        "max_rel_error": max(c["max_rel_error"] for c in checks),
        "all_passed": all(c["passed"] for c in checks),
        "tolerance": GRADCHECK_TOLERANCE,
    }
