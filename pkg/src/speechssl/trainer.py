"""Deterministic pre-training loop.

Every random draw is keyed on (named seed, step, utterance position), never
on mutable generator state, so any step can be recomputed in isolation:
two runs with the same seeds are bit-identical and resuming from a
checkpoint reproduces the uninterrupted run exactly.

Step order: draw batch -> mix -> features on mixed audio -> masks ->
encoder forward -> quantize tap rows at masked steps -> losses -> manual
backward -> Adam update. Pseudo-labels always come from clean audio; they
are computed before training and never recomputed from mixed waveforms.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import FixedGain, GainPolicy, UniformSnrGain, mix_batch
from .corpus import Batch, make_batch
from .dsp import MfccConfig, mfcc
from .encoder import (
    EncoderConfig,
    backward,
    forward,
    init_encoder_params,
    sample_mask,
    zero_grads,
)
from .losses import (
    LossBreakdown,
    LossCounts,
    LossWeights,
    combine,
    content_loss_batch,
    contrastive_loss,
    diversity_loss,
)
from .numerics import derive_seed
from .pseudolabel import PseudoLabelSequence
from .quantizer import (
    QuantizerConfig,
    QuantizerState,
    init_quantizer_params,
    quantize,
    quantize_backward,
    tau_at,
    usage_stats,
)

CLEAN_LABEL_SOURCES = ("mfcc", "embedding:layer")
CHECKPOINT_FORMAT = "speechssl-checkpoint-v1"


@dataclass
class Seeds:
    data: int = 0
    model: int = 1
    mixing: int = 2
    masking: int = 3
    negatives: int = 4
    noise: int = 5


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    utterance_length: int = 8000
    learning_rate: float = 4e-3
    warmup_frac: float = 0.08
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    mix_probability: float = 0.2
    gain_fixed: float | None = None       # set to use a fixed mixing gain
    gain_snr_low: float = -5.0
    gain_snr_high: float = 5.0
    quantizer_hard: bool = True
    speaker_loss: bool = True             # ablation: False trains on content only
    distinct_speakers: bool = True        # draw batches from distinct speakers
    checkpoint_every: int = 0             # 0 = only final
    seeds: Seeds = field(default_factory=Seeds)
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.quantizer.latent_dim != self.encoder.model_dim:
            raise ValueError("quantizer latent_dim must equal encoder model_dim")
        if self.quantizer.out_dim != self.encoder.model_dim:
            raise ValueError("quantizer out_dim must equal encoder model_dim")

    @property
    def gain_policy(self) -> GainPolicy:
        if self.gain_fixed is not None:
            return FixedGain(self.gain_fixed)
        return UniformSnrGain(self.gain_snr_low, self.gain_snr_high)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for key, sub in (("seeds", Seeds), ("weights", LossWeights),
                         ("encoder", EncoderConfig), ("quantizer", QuantizerConfig),
                         ("mfcc", MfccConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        return cls(**data)


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over warmup_frac of the run, then linear decay to 0."""
    warmup = max(1, math.ceil(cfg.warmup_frac * cfg.steps))
    if step <= warmup:
        return cfg.learning_rate * step / warmup
    if cfg.steps == warmup:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.steps - step) / (cfg.steps - warmup)


@dataclass
class TrainState:
    params: dict
    adam_m: dict
    adam_v: dict
    step: int = 0
    last_usage: np.ndarray | None = None  # batch-averaged codebook usage


def init_state(config: TrainConfig) -> TrainState:
    params = init_encoder_params(config.encoder, derive_seed(config.seeds.model, "encoder"))
    params.update(
        init_quantizer_params(config.quantizer, derive_seed(config.seeds.model, "quantizer"))
    )
    return TrainState(params, zero_grads(params), zero_grads(params), 0)


def adam_update(state: TrainState, grads: dict, lr: float, cfg: TrainConfig) -> None:
    """In-place Adam step in sorted parameter order."""
    t = state.step
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    for name in sorted(state.params):
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        state.params[name] -= lr * mhat / (np.sqrt(vhat) + eps)


def _check_label_provenance(labels) -> None:
    for seq in labels:
        if not isinstance(seq, PseudoLabelSequence):
            raise ValueError("labels must be PseudoLabelSequence instances")
        if not seq.source.startswith(CLEAN_LABEL_SOURCES):
            raise ValueError(
                f"label source {seq.source!r} is not a clean-audio source; "
                "content targets must be computed before mixing"
            )


def train_step(state: TrainState, batch: Batch, labels, config: TrainConfig):
    """One optimization step. `labels` are per-batch-member pseudo-labels
    computed from the clean audio. Returns (state, LossBreakdown)."""
    _check_label_provenance(labels)
    step = state.step + 1
    seeds = config.seeds
    enc_cfg = config.encoder

    mixed = mix_batch(
        batch, config.mix_probability, config.gain_policy,
        seed=derive_seed(seeds.mixing, "mix", step),
    )
    features = [mfcc(u.waveform, config.mfcc, meta=u.id) for u in mixed.batch.utterances]
    for feats, seq in zip(features, labels):
        if feats.num_frames != len(seq):
            raise ValueError(
                f"utterance {feats.meta!r}: {feats.num_frames} frames vs "
                f"{len(seq)} labels; labels must come from the clean audio "
                "at the training utterance length"
            )

    masks = [
        sample_mask(f.num_frames, enc_cfg, derive_seed(seeds.masking, "mask", step, b),
                    min_spans=1)
        for b, f in enumerate(features)
    ]
    outputs = [forward(f, m, state.params, enc_cfg) for f, m in zip(features, masks)]

    if config.speaker_loss:
        qstate = QuantizerState(
            config.quantizer, state.params,
            tau_at(step, config.steps, config.quantizer.tau_start,
                   config.quantizer.tau_end),
        )
        qouts = [
            quantize(out.tap[mask.indices], qstate,
                     seed=derive_seed(seeds.noise, "noise", step, b),
                     hard=config.quantizer_hard)
            for b, (out, mask) in enumerate(zip(outputs, masks))
        ]
        p_bar = usage_stats(qouts)
        state.last_usage = p_bar
        div_value, dp_bar = diversity_loss(p_bar)
        contr = contrastive_loss(
            [out.tap for out in outputs], qouts, masks, config.weights,
            seed=derive_seed(seeds.negatives, "neg", step),
        )
        contrastive_value = contr.value
        num_pos, num_neg = contr.num_positives, contr.num_negatives
    else:
        contrastive_value, div_value = 0.0, 0.0
        num_pos = num_neg = 0
    cont_value, dlogits_list = content_loss_batch(
        [out.content_logits for out in outputs], labels, masks
    )
    counts = LossCounts(num_pos, num_neg, sum(len(m) for m in masks))
    breakdown = combine(contrastive_value, div_value, cont_value, config.weights, counts)
    if not np.isfinite(breakdown.total):
        raise FloatingPointError(f"non-finite loss at step {step}: {breakdown}")

    grads = zero_grads(state.params)
    for b, out in enumerate(outputs):
        dtap = None
        if config.speaker_loss:
            total_frames = sum(q.num_frames for q in qouts)
            dprobs = np.broadcast_to(
                config.weights.alpha * dp_bar / total_frames, qouts[b].probs.shape
            )
            dlatent, qgrads = quantize_backward(qouts[b], qstate, contr.dqs[b], dprobs)
            for key, grad in qgrads.items():
                grads[key] += grad
            dtap = contr.dtaps[b].copy()
            dtap[masks[b].indices] += dlatent
        backward(out, state.params, enc_cfg,
                 dlogits=config.weights.beta * dlogits_list[b],
                 dtap=dtap, grads=grads)

    state.step = step
    adam_update(state, grads, learning_rate_at(step, config), config)
    return state, breakdown


def draw_batch(corpus, config: TrainConfig, step: int) -> Batch:
    """Seeded per-step batch. When every utterance carries a speaker tag and
    enough speakers exist, members are drawn from distinct speakers (the
    contrastive loss treats other batch members as different-speaker
    negatives, so same-speaker collisions would push a speaker apart)."""
    seed = derive_seed(config.seeds.data, "batch", step)
    speakers = sorted({u.speaker for u in corpus if u.speaker is not None})
    stratify = (config.distinct_speakers and len(speakers) >= config.batch_size
                and all(u.speaker is not None for u in corpus))
    if not stratify:
        return make_batch(corpus, config.batch_size, config.utterance_length, seed)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(speakers), size=config.batch_size, replace=False)
    members = []
    for idx in chosen:
        pool = [u for u in corpus if u.speaker == speakers[idx]]
        members.append(pool[rng.integers(len(pool))])
    batch = make_batch(members, config.batch_size, config.utterance_length,
                       seed=derive_seed(seed, "crop"))
    return batch


def train(
    config: TrainConfig,
    corpus,
    labels_by_id: dict[str, PseudoLabelSequence],
    out_dir=None,
    resume: "Checkpoint | None" = None,
    until_step: int | None = None,
):
    """Run (or continue) pre-training. Returns (Checkpoint, metrics list).

    With out_dir set, metrics stream to metrics.jsonl and checkpoints are
    written on the checkpoint_every schedule plus at the end.
    """
    missing = [u.id for u in corpus if u.id not in labels_by_id]
    if missing:
        raise ValueError(f"no labels for utterances: {missing[:5]}")
    if resume is not None:
        state = TrainState(resume.params, resume.adam_m, resume.adam_v, resume.step)
        metrics = list(resume.metrics_tail)
    else:
        state = init_state(config)
        metrics = []
    last_step = min(until_step or config.steps, config.steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        metrics_fh = open(out_dir / "metrics.jsonl", mode, encoding="utf-8")
    try:
        while state.step < last_step:
            step = state.step + 1
            batch = draw_batch(corpus, config, step)
            labels = [labels_by_id[u.id] for u in batch.utterances]
            state, breakdown = train_step(state, batch, labels, config)
            record = {"step": step, "lr": learning_rate_at(step, config)}
            record.update(breakdown.as_dict())
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if (out_dir is not None and config.checkpoint_every
                    and step % config.checkpoint_every == 0 and step < last_step):
                save_checkpoint(out_dir / f"checkpoint_{step:06d}", state, config, metrics)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    ckpt = Checkpoint(config, state.params, state.adam_m, state.adam_v,
                      state.step, metrics[-10:])
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final", state, config, metrics)
        summary = {
            "steps": state.step,
            "mean_total_last_tenth": float(
                np.mean([m["total"] for m in metrics[-max(1, len(metrics) // 10):]])
            ),
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        if state.last_usage is not None:
            write_usage_histogram(out_dir / "usage.json", state.last_usage)
    return ckpt, metrics


def write_usage_histogram(path, p_bar: np.ndarray) -> None:
    """Codebook usage diagnostics: last-step averaged selection probabilities
    and each codebook's usage perplexity (V means perfectly uniform use)."""
    entropy = -np.sum(np.where(p_bar > 0, p_bar * np.log(p_bar), 0.0), axis=-1)
    doc = {
        "num_codebooks": int(p_bar.shape[0]),
        "num_entries": int(p_bar.shape[1]),
        "mean_probs": [row.tolist() for row in p_bar],
        "perplexity": np.exp(entropy).tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Checkpointing: {stem}.json metadata + {stem}.bin float64 little-endian blob


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    metrics_tail: list = field(default_factory=list)

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.config.encoder

    @property
    def mfcc_config(self) -> MfccConfig:
        return self.config.mfcc


def save_checkpoint(stem, state: TrainState, config: TrainConfig, metrics) -> None:
    stem = Path(stem)
    manifest = []
    chunks = []
    offset = 0
    groups = (("param", state.params), ("adam_m", state.adam_m), ("adam_v", state.adam_v))
    for prefix, group in groups:
        for key in sorted(group):
            arr = np.ascontiguousarray(group[key], dtype=np.float64)
            manifest.append([f"{prefix}/{key}", offset, list(arr.shape)])
            chunks.append(arr.reshape(-1))
            offset += arr.size
    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "config": config.to_dict(),
        "manifest": manifest,
        "metrics_tail": metrics[-10:],
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    stem.with_suffix(".bin").write_bytes(
        np.concatenate(chunks).astype("<f8").tobytes()
    )


def load_checkpoint(stem) -> Checkpoint:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {stem}")
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, offset, shape in meta["manifest"]:
        prefix, key = name.split("/", 1)
        size = int(np.prod(shape)) if shape else 1
        groups[prefix][key] = (
            blob[offset : offset + size].astype(np.float64).reshape(shape)
        )
    config = TrainConfig.from_dict(meta["config"])
    return Checkpoint(config, groups["param"], groups["adam_m"], groups["adam_v"],
                      meta["step"], meta.get("metrics_tail", []))


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict
    num_coords: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def tiny_config(seed: int = 0) -> TrainConfig:
    """A deliberately small configuration for finite-difference work."""
    return TrainConfig(
        steps=10,
        batch_size=3,
        utterance_length=400,
        mix_probability=0.0,
        quantizer_hard=False,
        weights=LossWeights(alpha=0.1, beta=1.0, kappa=0.1, num_negatives=4),
        encoder=EncoderConfig(
            input_dim=6, model_dim=16, num_layers=2, num_heads=2, ffn_dim=24,
            num_classes=4, tap_layer=1, mask_span=2, mask_start_prob=0.3,
        ),
        quantizer=QuantizerConfig(
            num_codebooks=2, num_entries=4, entry_dim=8, latent_dim=16, out_dim=16,
        ),
        seeds=Seeds(*(derive_seed(seed, name) for name in
                      ("data", "model", "mixing", "masking", "negatives", "noise"))),
    )


def _loss_on_instance(params: dict, features, labels, masks, config: TrainConfig,
                      noise_seeds, neg_seed, tau: float) -> float:
    outputs = [forward(f, m, params, config.encoder) for f, m in zip(features, masks)]
    qstate = QuantizerState(config.quantizer, params, tau)
    qouts = [
        quantize(out.tap[mask.indices], qstate, seed=ns, hard=config.quantizer_hard)
        for out, mask, ns in zip(outputs, masks, noise_seeds)
    ]
    div_value, _ = diversity_loss(usage_stats(qouts))
    contr = contrastive_loss([o.tap for o in outputs], qouts, masks, config.weights,
                             seed=neg_seed)
    cont_value, _ = content_loss_batch([o.content_logits for o in outputs], labels, masks)
    return combine(contr.value, div_value, cont_value, config.weights).total


def _grads_on_instance(params: dict, features, labels, masks, config: TrainConfig,
                       noise_seeds, neg_seed, tau: float) -> dict:
    outputs = [forward(f, m, params, config.encoder) for f, m in zip(features, masks)]
    qstate = QuantizerState(config.quantizer, params, tau)
    qouts = [
        quantize(out.tap[mask.indices], qstate, seed=ns, hard=config.quantizer_hard)
        for out, mask, ns in zip(outputs, masks, noise_seeds)
    ]
    p_bar = usage_stats(qouts)
    _, dp_bar = diversity_loss(p_bar)
    contr = contrastive_loss([o.tap for o in outputs], qouts, masks, config.weights,
                             seed=neg_seed)
    _, dlogits_list = content_loss_batch([o.content_logits for o in outputs], labels, masks)
    grads = zero_grads(params)
    total_frames = sum(q.num_frames for q in qouts)
    for b, out in enumerate(outputs):
        dprobs = np.broadcast_to(
            config.weights.alpha * dp_bar / total_frames, qouts[b].probs.shape
        )
        dlatent, qgrads = quantize_backward(qouts[b], qstate, contr.dqs[b], dprobs)
        for key, grad in qgrads.items():
            grads[key] += grad
        dtap = contr.dtaps[b].copy()
        dtap[masks[b].indices] += dlatent
        backward(out, params, config.encoder,
                 dlogits=config.weights.beta * dlogits_list[b], dtap=dtap, grads=grads)
    return grads


def grad_check(
    config: TrainConfig | None = None,
    seed: int = 0,
    num_coords: int = 240,
    step_size: float = 1e-4,
    groups: list[str] | None = None,
) -> GradCheckReport:
    """Analytic gradients of the full combined loss vs central finite
    differences, sampled across every parameter group (soft quantizer mode)."""
    from .dsp import FeatureSequence

    config = config or tiny_config(seed)
    if config.quantizer_hard:
        config = replace(config, quantizer_hard=False)
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    num_frames = 8
    enc = config.encoder
    features = [
        FeatureSequence(rng.standard_normal((num_frames, enc.input_dim)), 100.0, f"probe{b}")
        for b in range(config.batch_size)
    ]
    labels = [
        PseudoLabelSequence(rng.integers(0, enc.num_classes, num_frames), enc.num_classes)
        for _ in range(config.batch_size)
    ]
    masks = [
        sample_mask(num_frames, enc, derive_seed(seed, "mask", b), min_spans=1)
        for b in range(config.batch_size)
    ]
    noise_seeds = [derive_seed(seed, "noise", b) for b in range(config.batch_size)]
    neg_seed = derive_seed(seed, "neg")
    tau = 1.0

    params = init_encoder_params(enc, derive_seed(seed, "enc-params"))
    params.update(init_quantizer_params(config.quantizer, derive_seed(seed, "q-params")))

    analytic = _grads_on_instance(params, features, labels, masks, config,
                                  noise_seeds, neg_seed, tau)

    keys = sorted(params) if groups is None else [
        k for k in sorted(params) if any(k.startswith(g) for g in groups)
    ]
    if not keys:
        raise ValueError("no parameter groups matched")
    per_key = max(1, math.ceil(num_coords / len(keys)))
    per_group: dict[str, float] = {}
    checked = 0
    for key in keys:
        flat = params[key].reshape(-1)
        n = min(per_key, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for c in coords:
            original = flat[c]
            flat[c] = original + step_size
            up = _loss_on_instance(params, features, labels, masks, config,
                                   noise_seeds, neg_seed, tau)
            flat[c] = original - step_size
            down = _loss_on_instance(params, features, labels, masks, config,
                                     noise_seeds, neg_seed, tau)
            flat[c] = original
            fd = (up - down) / (2 * step_size)
            an = analytic[key].reshape(-1)[c]
            rel = abs(an - fd) / max(abs(an) + abs(fd), 1e-8)
            worst = max(worst, rel)
            checked += 1
        per_group[key] = worst
    return GradCheckReport(max(per_group.values()), per_group, checked)
