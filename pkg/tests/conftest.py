import numpy as np
import pytest

from sceneiqa.core import SceneAffineTable
from sceneiqa.data import generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset for fast training smoke tests: 4 scenes x 8 images."""
    out = tmp_path_factory.mktemp("tinyset")
    rng = np.random.default_rng(3)
    truth = SceneAffineTable(
        tuple(rng.uniform(0.5, 3.0, 4)), tuple(rng.uniform(-1.0, 2.0, 4)))
    manifest = generate_synthetic_dataset(4, 8, truth, seed=3, out_dir=out,
                                          image_size=240)
    return {"dir": out, "manifest": manifest, "truth": truth}


@pytest.fixture(scope="session")
def tiny_run(tiny_dataset, tmp_path_factory):
    """A short training run on the tiny dataset: checkpoint + split file."""
    from sceneiqa.data import SplitSpec, load_manifest, save_split
    from sceneiqa.model import ModelConfig
    from sceneiqa.train import TrainConfig, run_training

    out = tmp_path_factory.mktemp("tinyrun")
    recs, registry = load_manifest(tiny_dataset["manifest"])
    split = SplitSpec(frozenset(registry.scene_ids[:3]),
                      frozenset(registry.scene_ids[3:]), seed=0)
    split_path = save_split(split, out / "split.txt")
    model_config = ModelConfig(num_scenes=3, patches_per_image=2,
                               hyper_head="linear_probe")
    train_config = TrainConfig(max_epochs=2, patience=2, batch_size=4, seed=5,
                               val_fraction=0.3, lr_heads=1e-3)
    ckpt, state = run_training(recs, split, model_config, train_config,
                               out, tiny_dataset["dir"])
    return {"dir": out, "checkpoint": ckpt, "split": split_path,
            "manifest": tiny_dataset["manifest"], "data_dir": tiny_dataset["dir"],
            "state": state}


def make_manifest_text(rows):
    header = "image_path,scene_id,lighting,attribute,score,face_x,face_y,face_w,face_h"
    return "\n".join([header] + rows) + "\n"
