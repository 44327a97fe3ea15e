"""Shared fixtures: a micro experiment profile and a fully trained micro
workspace reused by the CLI tests.

The micro profile runs the entire pipeline in about a minute on one CPU
core; quality gates are lowered accordingly (the desk-scale gates are
exercised by the acceptance suite).
"""

import numpy as np
import pytest
import torch

from brainprog.autoencoder import Stage1Config, Stage1Weights
from brainprog.config import (
    AblationEntry,
    CohortConfig,
    ExperimentConfig,
    ProtocolConfig,
    dump_config,
)
from brainprog.diffusion import GuidanceConfig, Stage2Config
from brainprog.phantom import PhantomConfig
from brainprog.segteacher import SegTrainConfig


def make_micro_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(
        seed=seed,
        phantom=PhantomConfig(dims=(24, 32, 24)),
        cohort=CohortConfig(n_subjects=14, visits_per_subject=2),
        teacher=SegTrainConfig(epochs=12, lr=3e-3, batch_size=4, dice_floor=0.80,
                               unet_channels=(8, 16, 32)),
        eval_segmenter=SegTrainConfig(epochs=12, lr=3e-3, batch_size=4, dice_floor=0.75,
                                      dilated_width=14),
        stage1=Stage1Config(
            pretrain_epochs=2, finetune_epochs=2, lr_pretrain=1e-3, lr_finetune=3e-4,
            lr_disc=2e-4, effective_batch=8, micro_batch=2,
            vae_channels=(8, 16, 32), disc_channels=(8, 16, 32),
            weights=Stage1Weights(),
        ),
        stage2=Stage2Config(
            T=1000, lr=3e-4, batch_size=8, epochs=6, channels=(16, 32, 32),
            guidance=GuidanceConfig(f_seg=5, gamma=1e-5, fast_steps=10),
            scale_samples=100,
        ),
        protocol=ProtocolConfig(
            inference_steps=8, eval_pairs_cap=4, sensitivity_subjects=4,
            counterfactual_subjects=4,
        ),
        ablation=(
            AblationEntry(name="cfg-a", stage1={}),
            AblationEntry(name="cfg-b", stage1={"weights": {"beta_kl": 1e-4}}),
        ),
    )


@pytest.fixture(scope="session")
def micro_workspace(tmp_path_factory):
    """A workspace with the full micro pipeline trained through the CLI."""
    from brainprog import cli

    ws = tmp_path_factory.mktemp("micro-ws")
    cfg_path = ws / "experiment.json"
    dump_config(make_micro_config(), cfg_path)
    base = ["--config", str(cfg_path), "--workspace", str(ws)]
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["train-teacher", *base]) == 0
    assert cli.main(["train-ae", *base, "--variant", "ae-seg"]) == 0
    assert cli.main(["train-ldm", *base, "--variant", "full"]) == 0
    return ws, cfg_path
