"""Train a small CNN and its augmentation policy on the synthetic dataset.

Runs in a few seconds.  The first epochs are warm-up: the policy stays at
its initial value and only the network trains.  Afterwards every
``inner_steps`` SGD steps are followed by one policy update driven by the
validation loss.

    python demos/synth_walkthrough.py
"""
import numpy as np

from hyperaug.autodiff import precision
from hyperaug.augment import OPS
from hyperaug.data import SplitSpec, split, synth_dataset
from hyperaug.hypergrad import HypergradConfig
from hyperaug.models import ModelSpec
from hyperaug.trainloop import TrainConfig, run, with_overrides

# 4 classes of noisy 16x16 blobs; 10% of the training pool is held out
train, val = split(synth_dataset(600, seed=0), SplitSpec(0.1, 0))
test = synth_dataset(200, seed=10_000)
spec = ModelSpec(input_shape=(1, 16, 16), num_classes=4, channels=(4, 8), hidden=(16,))

cfg = TrainConfig(
    epochs=6, warmup_epochs=2, inner_steps=4, dataset_kind="synth", record_wall_time=False,
    hypergrad=HypergradConfig(alpha=1e-3, neumann_terms=5),
)

with precision("float64"):
    madao = run(cfg, spec, train, val, test)
    fixed = run(with_overrides(cfg, method="fixed-policy"), spec, train, val, test)

print("epoch  madao  fixed  outer-steps")
for a, b in zip(madao.records, fixed.records):
    print(f"{a['epoch']:>5}  {a['test_error']:.3f}  {b['test_error']:.3f}  {a.get('outer_steps', 0):>5}")

# which ops did the first stage learn to prefer?
pi = madao.policy.effective()["pi"][0]
for i in np.argsort(pi)[::-1][:4]:
    print(f"stage 0 favours {OPS[i].value:<13} pi={pi[i]:.4f}")
