import logging

import numpy as np
import pytest
import torch

from synthimages import write_corpus

from fovstego.backbone import BackboneSpec, PretrainConfig, pretrain_desk_backbone
from fovstego.data import build_manifest, load_split
from fovstego.train import TrainConfig, train_model

logging.getLogger("fovstego").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def corpus_dirs(tmp_path_factory):
    """Two synthetic image sources, 140 images each, varied sizes."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(7)
    write_corpus(root / "src_a", 140, rng)
    write_corpus(root / "src_b", 140, rng)
    return [root / "src_a", root / "src_b"]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 32-image source for fast unit-level runs."""
    root = tmp_path_factory.mktemp("tinycorpus")
    rng = np.random.default_rng(13)
    write_corpus(root / "imgs", 32, rng, size_range=(40, 56))
    return root / "imgs"


@pytest.fixture(scope="session")
def tiny_setup(tiny_corpus, tmp_path_factory):
    """Manifest + frozen mini-backbone at 32px for mechanics tests."""
    out = tmp_path_factory.mktemp("tinysetup")
    manifest = build_manifest(
        [tiny_corpus], (16, 4, 4), seed=3, resolution=32, out_path=out / "manifest.tsv"
    )
    train_np, _ = load_split(manifest, "train")
    val_np, _ = load_split(manifest, "val")
    spec = BackboneSpec(base_width=16)
    cfg = PretrainConfig(epochs=6, batch_size=8, learning_rate=2e-3, psnr_target=18.0, seed=0)
    backbone = pretrain_desk_backbone(train_np, val_np, spec, cfg, out_path=out / "backbone.pt")
    return {
        "out": out,
        "manifest": manifest,
        "manifest_path": out / "manifest.tsv",
        "backbone": backbone,
        "backbone_path": out / "backbone.pt",
    }


@pytest.fixture(scope="session")
def tiny_model(tiny_setup, tmp_path_factory):
    """A briefly trained k=8 model plus its checkpoint paths."""
    out = tmp_path_factory.mktemp("tinyrun")
    cfg = TrainConfig(
        k=8,
        resolution=32,
        epochs=4,
        batch_size=8,
        seed=1,
        learning_rate=1e-3,
        warmup_start_epochs=1,
        warmup_ramp_epochs=1,
        image_loss="mse",
    )
    result = train_model(
        cfg,
        tiny_setup["manifest"],
        tiny_setup["backbone"],
        out,
        backbone_path=str(tiny_setup["backbone_path"]),
    )
    return {"cfg": cfg, "result": result, "setup": tiny_setup, "out": out}


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)
