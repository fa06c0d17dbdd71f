"""Shared builders for desk-scale training tests: a small synthetic corpus,
its MFCC-cluster labels, and a fast TrainConfig."""

import numpy as np
import pytest

from speechssl.corpus import synth_corpus
from speechssl.dsp import mfcc
from speechssl.encoder import EncoderConfig
from speechssl.losses import LossWeights
from speechssl.pseudolabel import assign, kmeans_fit
from speechssl.quantizer import QuantizerConfig
from speechssl.trainer import Seeds, TrainConfig


def fast_config(steps=8, seed=0, **overrides) -> TrainConfig:
    base = dict(
        steps=steps,
        batch_size=3,
        utterance_length=1600,
        learning_rate=2e-3,
        mix_probability=0.2,
        checkpoint_every=0,
        seeds=Seeds(seed, seed + 1, seed + 2, seed + 3, seed + 4, seed + 5),
        weights=LossWeights(num_negatives=10),
        encoder=EncoderConfig(
            input_dim=39, model_dim=32, num_layers=2, num_heads=4, ffn_dim=48,
            num_classes=6, tap_layer=1, mask_span=4, mask_start_prob=0.15,
        ),
        quantizer=QuantizerConfig(
            num_codebooks=2, num_entries=8, entry_dim=16, latent_dim=32, out_dim=32,
        ),
    )
    base.update(overrides)
    return TrainConfig(**base)


def labeled_corpus(config: TrainConfig, num_speakers=3, utts_per_speaker=4, seed=0):
    duration = config.utterance_length / 16000
    corpus = synth_corpus(num_speakers, utts_per_speaker, duration=duration, seed=seed)
    feats = {u.id: mfcc(u.waveform, config.mfcc, meta=u.id) for u in corpus}
    pooled = np.concatenate([f.frames for f in feats.values()])
    model = kmeans_fit(pooled, config.encoder.num_classes, seed=seed, restarts=2)
    labels = {uid: assign(model, f) for uid, f in feats.items()}
    return corpus, labels


@pytest.fixture(scope="session")
def small_setup():
    config = fast_config()
    corpus, labels = labeled_corpus(config)
    return config, corpus, labels
