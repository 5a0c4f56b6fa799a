"""Command-line entry point: ``referee <verb> [flags]``.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from referee import archive, checkpoint as ckpt
from referee.audio import AudioError, write_wav
from referee.config import ConfigError, as_int_tuple, load_config, merge
from referee.core import ManifestError, load_manifest
from referee.extractor import FrameConfig, PpgModel, PpgModelConfig, estimate_f0, pad_for_analysis
from referee.pipeline import (
    MissingDescriptor,
    extract_corpus,
    load_corpus_descriptors,
    target_waveforms,
    train_ppg_on_corpus,
    write_archives,
)
from referee.refine import DiscriminatorConfig, RefineConfig, refine, write_loss_log
from referee.s2w import (
    ConditioningFeatures,
    FlowItem,
    S2WConfig,
    S2WModel,
    S2WState,
    WaveDiscriminator,
    WaveItem,
    f0_target,
    s2w_infer,
    stage1_train,
    stage2_train,
)
from referee.t2s import T2SConfig, T2SModel, build_model, ppg_for_synthesis, pretrain
from referee.utils import configure_adam, make_adam, seed_everything, set_deterministic

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class PrerequisiteError(Exception):
    pass


SHARED_DEFAULTS = {"seed": 0, "deterministic": False, "beta1": 0.9, "beta2": 0.98, "adam_eps": 1e-9}

FRAME_DEFAULTS = {"sample_rate": 24000, "hop": 240, "window": 960, "f0_min": 50.0, "f0_max": 600.0}

T2S_DEFAULTS = {
    "t2s_blocks": 4,
    "t2s_hidden": 256,
    "t2s_heads": 2,
    "t2s_kernel": 9,
    "t2s_filter": 1024,
    "t2s_style_dim": 128,
    "t2s_dropout": 0.1,
}

S2W_DEFAULTS = {
    "s2w_latent": 32,
    "s2w_couplings": 4,
    "s2w_strides": (4, 4, 3, 5),
    "s2w_channels": (16, 32, 64, 128),
    "s2w_flow_hidden": 64,
    "s2w_ppg_hidden": 128,
}


def _frame_cfg(o) -> FrameConfig:
    return FrameConfig(
        sample_rate=int(o["sample_rate"]), hop=int(o["hop"]), window=int(o["window"]),
        f0_min=float(o["f0_min"]), f0_max=float(o["f0_max"]),
    )


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _setup(o) -> None:
    configure_adam(o["beta1"], o["beta2"], o["adam_eps"])
    seed_everything(int(o["seed"]))
    set_deterministic(bool(o["deterministic"]))


def _require_file(path, what: str) -> Path:
    if path is None:
        raise PrerequisiteError(f"missing artifact: {what} was not given")
    p = Path(path)
    if not p.exists():
        raise PrerequisiteError(f"missing artifact: {what} {p} does not exist")
    return p


# ---------------------------------------------------------------- verbs


def cmd_make_toy_corpus(o) -> int:
    from referee.toy import make_toy_corpus

    manifest = make_toy_corpus(
        o["out"], num_styles=int(o["styles"]), per_style=int(o["per_style"]),
        num_phones=int(o["phones"]), seed=int(o["seed"]),
        hop=int(o["hop"]), sample_rate=int(o["sample_rate"]),
    )
    print(f"wrote {manifest}")
    return EXIT_OK


def _load_ppg(path) -> PpgModel:
    meta, tensors = ckpt.read_checkpoint(path, ckpt.PPG_MAGIC)
    c = meta["config"]
    model = PpgModel(PpgModelConfig(input_dim=c["input_dim"], hidden=tuple(c["hidden"]),
                                    output_dim=c["output_dim"], kernel=c["kernel"]))
    ckpt.load_module_state(model, tensors, "model")
    model.eval()
    return model


def cmd_train_ppg(o) -> int:
    corpus = load_manifest(_require_file(o["manifest"], "manifest"))
    fcfg = _frame_cfg(o)
    mcfg = PpgModelConfig(input_dim=fcfg.n_mels, hidden=as_int_tuple(o["ppg_hidden"]),
                          output_dim=corpus.header.inventory_size)
    rows = []
    model = train_ppg_on_corpus(corpus, fcfg, mcfg, int(o["steps"]), seed=int(o["seed"]), lr=float(o["lr"]),
                                log=lambda s, l: rows.append((s, l)))
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(out, ckpt.PPG_MAGIC, {"kind": "ppg", "config": asdict(mcfg), "steps": int(o["steps"])},
                         {"model": model})
    _write_csv(str(out) + ".loss.csv", ["step", "loss"], rows)
    print(f"trained PPG model ({len(rows)} steps) -> {out}")
    return EXIT_OK


def cmd_extract(o) -> int:
    corpus = load_manifest(_require_file(o["manifest"], "manifest"))
    model = _load_ppg(_require_file(o["ppg_model"], "PPG model"))
    if model.cfg.output_dim != corpus.header.inventory_size:
        raise PrerequisiteError("PPG model output size does not match the manifest phone inventory")
    descs, failures = extract_corpus(corpus, model, _frame_cfg(o), workers=max(1, int(o["workers"])))
    write_archives(descs, o["out"])
    for f in failures:
        print(f"FAILED {f.utt_id}: {f.reason}", file=sys.stderr)
    print(f"extracted {len(descs)} of {len(corpus.records)} utterances, {len(failures)} failed")
    return EXIT_ERROR if failures else EXIT_OK


def _t2s_cfg(o, corpus) -> T2SConfig:
    return T2SConfig(
        num_phones=corpus.header.inventory_size,
        num_styles=corpus.header.num_styles,
        num_blocks_encoder=int(o["t2s_blocks"]),
        num_blocks_decoder=int(o["t2s_blocks"]),
        hidden=int(o["t2s_hidden"]),
        heads=int(o["t2s_heads"]),
        conv_kernel=int(o["t2s_kernel"]),
        conv_filter=int(o["t2s_filter"]),
        style_embedding_dim=int(o["t2s_style_dim"]),
        ppg_dim=corpus.header.inventory_size,
        dropout=float(o["t2s_dropout"]),
        predictor_hidden=int(o["t2s_hidden"]),
    )


def _save_t2s(path, model, step, optimizer=None, discs=None, extra=None):
    modules = {"model": model}
    if discs is not None:
        modules["disc_style"], modules["disc_phone"] = discs
    meta = {"kind": "t2s", "config": model.cfg.to_dict(), "step": step}
    meta.update(extra or {})
    ckpt.save_checkpoint(path, ckpt.T2S_MAGIC, meta, modules, {"adam": optimizer} if optimizer else None)


def load_t2s(path):
    meta, tensors = ckpt.read_checkpoint(path, ckpt.T2S_MAGIC)
    model = T2SModel(T2SConfig(**meta["config"]))
    ckpt.load_module_state(model, tensors, "model")
    model.eval()
    return model, meta, tensors


def cmd_pretrain_t2s(o) -> int:
    corpus = load_manifest(_require_file(o["manifest"], "manifest"))
    _require_file(o["descriptors"], "descriptor directory")
    descs = load_corpus_descriptors(corpus, o["descriptors"])
    step0 = 0
    if o["resume"]:
        model, meta, tensors = load_t2s(_require_file(o["resume"], "resume checkpoint"))
        opt = make_adam(model.parameters(), float(o["lr"]))
        if "adam" in meta["optimizers"]:
            ckpt.optimizer_from_arrays(opt, meta["optimizers"]["adam"], tensors, "optim/adam")
        step0 = int(meta["step"])
    else:
        model = build_model(_t2s_cfg(o, corpus), seed=int(o["seed"]))
        opt = None
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    every = int(o["checkpoint_every"])
    state = pretrain(
        model, descs, int(o["steps"]), lr=float(o["lr"]), batch_size=int(o["batch_size"]),
        seed=int(o["seed"]), optimizer=opt, start_step=step0,
        log=lambda s, l: rows.append([s] + [l[k] for k in ("ppg_mse", "pitch_mse", "energy_mse", "duration_mse", "total")]),
        checkpoint_every=every,
        on_checkpoint=lambda st: _save_t2s(out, st.model, st.step, st.optimizer),
    )
    _save_t2s(out, state.model, state.step, state.optimizer)
    _write_csv(str(out) + ".loss.csv", ["step", "ppg_mse", "pitch_mse", "energy_mse", "duration_mse", "total"], rows)
    print(f"pretrained T2S to step {state.step} -> {out}")
    return EXIT_OK


def cmd_refine_t2s(o) -> int:
    corpus = load_manifest(_require_file(o["manifest"], "manifest"))
    _require_file(o["descriptors"], "descriptor directory")
    model, meta, _ = load_t2s(_require_file(o["t2s"], "pretrained T2S checkpoint"))
    target = int(o["target_style"])
    if not 0 <= target < model.cfg.num_styles:
        raise UsageError(f"--target-style {target} outside [0, {model.cfg.num_styles})")
    descs = load_corpus_descriptors(corpus, o["descriptors"])
    rcfg = RefineConfig(
        alpha=float(o["alpha"]), lr=float(o["lr"]), batch=int(o["batch_size"]), steps=int(o["steps"]),
        update_ratio=int(o["update_ratio"]), disc_lr=float(o["disc_lr"]), squared_fake=not o["unsquared_fake"],
    )
    dcfg = DiscriminatorConfig(widths=as_int_tuple(o["disc_widths"]))
    state = refine(model, descs, target, rcfg, dcfg, seed=int(o["seed"]))
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _save_t2s(out, model, int(meta["step"]), discs=(state.disc_style, state.disc_phone),
              extra={"refined_style": target, "refine_steps": rcfg.steps})
    write_loss_log(str(out) + ".loss.csv", state.log)
    print(f"refined T2S on style {target} for {rcfg.steps} steps -> {out}")
    return EXIT_OK


def _s2w_cfg(o, ppg_dim: int) -> S2WConfig:
    return S2WConfig(
        ppg_dim=ppg_dim,
        latent_channels=int(o["s2w_latent"]),
        coupling_layers=int(o["s2w_couplings"]),
        strides=as_int_tuple(o["s2w_strides"]),
        wave_channels=as_int_tuple(o["s2w_channels"]),
        flow_hidden=int(o["s2w_flow_hidden"]),
        ppg_hidden=int(o["s2w_ppg_hidden"]),
    )


def save_s2w(path, state: S2WState, stage: int) -> None:
    modules = {"model": state.model}
    if state.disc is not None:
        modules["disc"] = state.disc
    opts = {k: v for k, v in (("g", state.g_opt), ("d", state.d_opt), ("flow", state.flow_opt)) if v is not None}
    meta = {"kind": "s2w", "config": state.model.cfg.to_dict(), "stage": stage,
            "stage1_steps": state.stage1_steps, "stage2_steps": state.stage2_steps}
    ckpt.save_checkpoint(path, ckpt.S2W_MAGIC, meta, modules, opts)


def load_s2w(path, lr: float = 1e-3, with_optimizers: bool = True):
    from referee.s2w import stage1_parameters, stage2_parameters

    meta, tensors = ckpt.read_checkpoint(path, ckpt.S2W_MAGIC)
    model = S2WModel(S2WConfig(**meta["config"]))
    ckpt.load_module_state(model, tensors, "model")
    model.eval()
    state = S2WState(model, stage1_steps=int(meta["stage1_steps"]), stage2_steps=int(meta["stage2_steps"]))
    if with_optimizers:
        if ckpt.has_module(tensors, "disc"):
            state.disc = WaveDiscriminator(model.cfg)
            ckpt.load_module_state(state.disc, tensors, "disc")
        opts = meta["optimizers"]
        if "g" in opts:
            state.g_opt = make_adam(stage1_parameters(model), lr)
            ckpt.optimizer_from_arrays(state.g_opt, opts["g"], tensors, "optim/g")
        if "d" in opts and state.disc is not None:
            state.d_opt = make_adam(state.disc.parameters(), lr)
            ckpt.optimizer_from_arrays(state.d_opt, opts["d"], tensors, "optim/d")
        if "flow" in opts:
            state.flow_opt = make_adam(stage2_parameters(model), lr)
            ckpt.optimizer_from_arrays(state.flow_opt, opts["flow"], tensors, "optim/flow")
    return state, meta


def cmd_train_s2w(o) -> int:
    stage = int(o["stage"])
    fcfg = _frame_cfg(o)
    out = Path(o["out"])
    if stage == 2:
        init = _require_file(o["init"], "stage-1 S2W checkpoint (--init)")
        _require_file(o["descriptors"], "descriptor directory")
    corpus = load_manifest(_require_file(o["manifest"], "manifest"))
    style = None if o["speaker_style"] is None else int(o["speaker_style"])
    waves = target_waveforms(corpus, fcfg, style)
    if not waves:
        raise PrerequisiteError("no target-speaker audio selected")
    out.parent.mkdir(parents=True, exist_ok=True)
    lr = float(o["lr"])
    if stage == 1:
        if o["init"]:
            state, _ = load_s2w(_require_file(o["init"], "S2W checkpoint"), lr)
        else:
            seed_everything(int(o["seed"]))
            state = S2WState(S2WModel(_s2w_cfg(o, corpus.header.inventory_size)))
        if state.model.hop != fcfg.hop:
            raise UsageError(f"S2W strides give hop {state.model.hop}, frame hop is {fcfg.hop}")
        items = [WaveItem(x, f0_target(estimate_f0(pad_for_analysis(x, fcfg), fcfg))[: r.num_frames]) for r, x in waves]
        rows = []
        stage1_train(state, items, int(o["steps"]), lr=lr, batch_size=int(o["batch_size"]),
                     segment_frames=int(o["segment_frames"]), seed=int(o["seed"]),
                     log=lambda s, r: rows.append([s] + [r[k] for k in ("recon", "kl", "adv", "f0", "d", "g")]))
        save_s2w(out, state, 1)
        _write_csv(str(out) + ".loss.csv", ["step", "recon", "kl", "adv", "f0", "d", "g"], rows)
    else:
        state, meta = load_s2w(init, lr)
        if int(meta["stage1_steps"]) == 0:
            raise PrerequisiteError(f"missing artifact: {init} holds no stage-1 training")
        by_id = {r.id: x for r, x in waves}
        descs = load_corpus_descriptors(corpus, o["descriptors"])
        items = []
        for r, d in zip(corpus.records, descs):
            if r.id in by_id:
                items.append(FlowItem(by_id[r.id], d.ppg, ConditioningFeatures.from_phonemes(d.pitch, d.energy, d.durations)))
        rows = []
        stage2_train(state, items, int(o["steps"]), lr=lr, batch_size=int(o["batch_size"]), seed=int(o["seed"]),
                     log=lambda s, r: rows.append([s, r["nll"]]))
        save_s2w(out, state, 2)
        _write_csv(str(out) + ".loss.csv", ["step", "nll"], rows)
    print(f"trained S2W stage {stage} -> {out}")
    return EXIT_OK


def _parse_phones(text: str) -> list[int]:
    try:
        ids = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--phones must be integer ids, got {text!r}") from None
    if not ids:
        raise UsageError("--phones is empty")
    return ids


def cmd_synth(o) -> int:
    phones = _parse_phones(o["phones"])
    t2s_path = _require_file(o["t2s"], "T2S checkpoint")
    s2w_path = _require_file(o["s2w"], "S2W checkpoint")
    # validate ids against the checkpoint header before building any model
    meta, _ = ckpt.read_checkpoint(t2s_path, ckpt.T2S_MAGIC, header_only=True)
    n_phones, n_styles = int(meta["config"]["num_phones"]), int(meta["config"]["num_styles"])
    bad = [p for p in phones if not 0 <= p < n_phones]
    if bad:
        raise UsageError(f"phone id {bad[0]} outside [0, {n_phones})")
    style = int(o["style"])
    if not 0 <= style < n_styles:
        raise UsageError(f"style {style} outside [0, {n_styles})")
    temperature = float(o["temperature"])
    if temperature < 0:
        raise UsageError("--temperature must be non-negative")

    t2s, _, _ = load_t2s(t2s_path)
    state, _ = load_s2w(s2w_path, with_optimizers=False)
    if state.model.cfg.ppg_dim != t2s.cfg.ppg_dim:
        raise PrerequisiteError("T2S and S2W checkpoints disagree on PPG dimension")
    with torch.no_grad():
        out = t2s(torch.tensor([phones]), torch.tensor([len(phones)]), torch.tensor([style]))
    durations = out.durations[0].numpy()
    pitch = out.pitch[0].numpy()
    energy = out.energy[0].numpy()
    ppg = ppg_for_synthesis(out.ppg[0].numpy())
    cond = ConditioningFeatures.from_phonemes(pitch, energy, durations)
    gen = torch.Generator().manual_seed(int(o["seed"]))
    wav = s2w_infer(state.model, ppg, cond, temperature, gen)
    write_wav(o["out"], wav, int(o["sample_rate"]))
    print(f"predicted duration total: {int(durations.sum())} frames; wrote {wav.shape[0]} samples -> {o['out']}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_const", const=True, help="single-threaded deterministic kernels")
    p.add_argument("--out", help="output path")
    p.add_argument("--beta1", type=float, help="Adam beta1 (default 0.9)")
    p.add_argument("--beta2", type=float, help="Adam beta2 (default 0.98)")
    p.add_argument("--adam-eps", type=float, help="Adam epsilon (default 1e-9)")
    p.add_argument("-v", "--verbose", action="store_true")


def _frame_flags(p) -> None:
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--f0-min", type=float)
    p.add_argument("--f0-max", type=float)


def _t2s_flags(p) -> None:
    for name, typ in (("blocks", int), ("hidden", int), ("heads", int), ("kernel", int),
                      ("filter", int), ("style-dim", int), ("dropout", float)):
        p.add_argument(f"--t2s-{name}", type=typ)


def _s2w_flags(p) -> None:
    p.add_argument("--s2w-latent", type=int)
    p.add_argument("--s2w-couplings", type=int)
    p.add_argument("--s2w-strides")
    p.add_argument("--s2w-channels")
    p.add_argument("--s2w-flow-hidden", type=int)
    p.add_argument("--s2w-ppg-hidden", type=int)


VERBS = {}


def _verb(sub, name, func, defaults, help_text):
    p = sub.add_parser(name, help=help_text)
    _shared(p)
    VERBS[name] = (func, {**SHARED_DEFAULTS, **defaults})
    p.set_defaults(verb=name)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="referee", description="Reference-free cross-speaker style transfer")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = _verb(sub, "make-toy-corpus", cmd_make_toy_corpus,
              {"out": None, "styles": 3, "per_style": 4, "phones": 8, **FRAME_DEFAULTS}, "write the seeded synthetic corpus")
    p.add_argument("--styles", type=int)
    p.add_argument("--per-style", type=int)
    p.add_argument("--phones", type=int)
    _frame_flags(p)

    p = _verb(sub, "train-ppg", cmd_train_ppg,
              {"out": None, "manifest": None, "steps": 2000, "lr": 1e-3, "ppg_hidden": (256, 256, 256), **FRAME_DEFAULTS},
              "train the frame-wise PPG classifier")
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ppg-hidden")
    _frame_flags(p)

    p = _verb(sub, "extract", cmd_extract,
              {"out": None, "manifest": None, "ppg_model": None, "workers": 1, **FRAME_DEFAULTS},
              "write one descriptor archive per utterance")
    p.add_argument("--manifest")
    p.add_argument("--ppg-model")
    p.add_argument("--workers", type=int)
    _frame_flags(p)

    p = _verb(sub, "pretrain-t2s", cmd_pretrain_t2s,
              {"out": None, "manifest": None, "descriptors": None, "steps": 50000, "lr": 1e-3, "batch_size": 64,
               "resume": None, "checkpoint_every": 0, **T2S_DEFAULTS},
              "teacher-forced multi-style T2S pretraining")
    p.add_argument("--manifest")
    p.add_argument("--descriptors")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume")
    p.add_argument("--checkpoint-every", type=int)
    _t2s_flags(p)

    p = _verb(sub, "refine-t2s", cmd_refine_t2s,
              {"out": None, "manifest": None, "descriptors": None, "t2s": None, "target_style": None, "steps": 5000,
               "lr": 1e-5, "batch_size": 16, "alpha": 10.0, "update_ratio": 1, "disc_lr": 2e-4,
               "disc_widths": (256, 256, 256), "unsquared_fake": False},
              "episodic adversarial refinement to a target style")
    p.add_argument("--manifest")
    p.add_argument("--descriptors")
    p.add_argument("--t2s")
    p.add_argument("--target-style", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--update-ratio", type=int)
    p.add_argument("--disc-lr", type=float)
    p.add_argument("--disc-widths")
    p.add_argument("--unsquared-fake", action="store_const", const=True,
                   help="use the unsquared fake terms in the discriminator losses")

    p = _verb(sub, "train-s2w", cmd_train_s2w,
              {"out": None, "manifest": None, "descriptors": None, "stage": None, "init": None, "steps": 2000,
               "lr": 1e-3, "batch_size": 4, "segment_frames": 40, "speaker_style": None,
               **FRAME_DEFAULTS, **S2W_DEFAULTS},
              "train the style-to-wave model (stage 1 or 2)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--manifest")
    p.add_argument("--descriptors")
    p.add_argument("--init", help="S2W checkpoint to start from (required for stage 2)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--segment-frames", type=int)
    p.add_argument("--speaker-style", type=int, help="restrict to records of this style id (target speaker)")
    _frame_flags(p)
    _s2w_flags(p)

    p = _verb(sub, "synth", cmd_synth,
              {"out": None, "t2s": None, "s2w": None, "phones": None, "style": None, "temperature": 0.667,
               "sample_rate": 24000},
              "text (phone ids) -> waveform in the target voice")
    p.add_argument("--t2s")
    p.add_argument("--s2w")
    p.add_argument("--phones", required=True, help="comma or space separated phone ids")
    p.add_argument("--style", type=int, required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--sample-rate", type=int)
    return parser


REQUIRED = {
    "make-toy-corpus": ("out",),
    "train-ppg": ("out", "manifest"),
    "extract": ("out", "manifest", "ppg_model"),
    "pretrain-t2s": ("out", "manifest", "descriptors"),
    "refine-t2s": ("out", "manifest", "descriptors", "t2s"),
    "train-s2w": ("out", "manifest"),
    "synth": ("out", "t2s", "s2w"),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    func, defaults = VERBS[args.verb]
    try:
        file_cfg = load_config(args.config) if args.config else {}
        o = merge(args, file_cfg, defaults)
        missing = [k for k in REQUIRED[args.verb] if o.get(k) is None]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        _setup(o)
        return func(o)
    except (UsageError, ConfigError) as exc:
        print(f"referee {args.verb}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except archive.VersionError as exc:
        print(f"referee {args.verb}: checkpoint version mismatch: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (PrerequisiteError, MissingDescriptor) as exc:
        print(f"referee {args.verb}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ManifestError, AudioError, archive.FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"referee {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
