"""Augmentation ablation: train with and without 1-template synthesized cases.

Per seed: 16 phantoms, 12 for training (one of them the template) and 4 held
out.  Both arms start from identical weights and run the same number of
epochs; only the training list differs.  Test Dice is the mean foreground
Dice over the 4 held-out phantoms.
"""
import time

import numpy as np

from liverseg.augment import expand_dataset
from liverseg.deform import RegistrationConfig
from liverseg.model import LiverFormerConfig, build_model
from liverseg.phantom import PhantomConfig, generate_dataset
from liverseg.train import TrainConfig, mean_foreground_dice, train_loop

DIMS = (16, 32, 32)
PHANTOM = PhantomConfig(dims=DIMS)
MODEL = LiverFormerConfig(input_dims=DIMS)
REGISTRATION = RegistrationConfig(pyramid_levels=2, iterations_per_level=20)


def train_config(seed, epochs):
    return TrainConfig(lr0=3e-3, decay_every=10 ** 6, epochs=epochs, seed=seed)


def ablation_seed(seed, epochs=5, n_train=12, n_test=4):
    cases = generate_dataset(n_train + n_test, PHANTOM, base_seed=1000 * (seed + 1))
    train, test = cases[:n_train], cases[n_train:]
    t0 = time.perf_counter()
    synth = expand_dataset([train[0].id], train, REGISTRATION)
    reg_time = time.perf_counter() - t0
    out = {"n_synth": len(synth), "reg_s": reg_time}
    for arm, data in (("plain", train), ("augmented", train + synth)):
        model = build_model("liverformer", MODEL, seed=seed)
        t0 = time.perf_counter()
        train_loop(model, data, [], train_config(seed, epochs))
        scores = [mean_foreground_dice(model.predict(c.image).data, c.labels.data) for c in test]
        out[arm + "_cases"] = scores
        out[arm] = float(np.mean(scores))
        out[arm + "_s"] = time.perf_counter() - t0
    return out


if __name__ == "__main__":
    import sys
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
    for s in range(3):
        print(s, ablation_seed(s, epochs), flush=True)
