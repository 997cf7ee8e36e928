"""End-to-end walkthrough: generate data, train the base model, and look at
what the discrete actions learned.

Runs in about a minute on one CPU core with the reduced sizes below; bump
n_samples/epochs toward configs/fixture.json for the full-quality run.
"""

import numpy as np

from actionvae.evaluation import cluster_agreement, effective_actions
from actionvae.synthdata import default_fixture_config, generate_dataset
from actionvae.training import (TrainConfig, build_from_config, init_mixture,
                                pretrain_vae, train_base)

config = TrainConfig(seed=0, pretrain_epochs=10, epochs=15)
data = generate_dataset(default_fixture_config(6000), seed=13)
holdout = data.subset(range(5400, 6000))
view = data.subset(range(5400)).training_view()

model = build_from_config(config)

print("pretraining encoder/decoder as a plain VAE ...")
logs = pretrain_vae(model, view, config)
print(f"  final pretrain ELBO {logs[-1].total:.1f}")

print("initializing the latent mixture with k-means ...")
init_mixture(model, view, config)

print("training the base model ...")
logs = train_base(model, view, config)
print(f"  objective {logs[0].total:.1f} -> {logs[-1].total:.1f} "
      f"over {len(logs)} epochs")

active = effective_actions(model, view, threshold=0.05)
print(f"effective actions (p > 0.05 somewhere): {sorted(active)}")

agreement = cluster_agreement(model, holdout)
print(f"agreement with hidden maneuver families: "
      f"nmi={agreement['nmi']:.3f} purity={agreement['purity']:.3f}")

# Which maneuver family dominates each action?
labels = holdout.labels()
assign = np.argmax(model.qy_base_batch(holdout.training_view().x,
                                       holdout.training_view().s), axis=1)
names = data.family_names
for k in sorted(set(assign.tolist())):
    member = labels[assign == k]
    top = np.bincount(member, minlength=len(names)).argmax()
    print(f"  action {k:2d}: mostly {names[top]} ({len(member)} samples)")
