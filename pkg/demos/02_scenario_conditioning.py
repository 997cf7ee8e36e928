"""Prior- vs posterior-conditioned prediction: after training the dual
encoder, predictions for a specific scenario become much sharper than the
scenario-agnostic action distributions.

Writes sigma-fan plots for one holdout scenario to ./demo_out/.
"""

import os

from actionvae.evaluation import export_plots, min_ade, predict
from actionvae.synthdata import default_fixture_config, generate_dataset
from actionvae.training import (TrainConfig, build_from_config, init_mixture,
                                pretrain_vae, train_base, train_dual)

config = TrainConfig(seed=0, pretrain_epochs=10, epochs=15)
data = generate_dataset(default_fixture_config(6000), seed=13)
holdout = data.subset(range(5400, 6000))
view = data.subset(range(5400)).training_view()

model = build_from_config(config)
print("training base model ...")
pretrain_vae(model, view, config)
init_mixture(model, view, config)
train_base(model, view, config)

print("training the scenario-conditioned (dual) encoder ...")
train_dual(model, view, config)

for mode in ("prior", "posterior"):
    ade = min_ade(model, holdout, mode=mode, top_m=3)
    print(f"  minADE top-3, {mode:9s}: {ade:.3f} m")

sample = holdout.samples[7]
os.makedirs("demo_out", exist_ok=True)
for mode in ("prior", "posterior"):
    pred = predict(model, sample.scenario.values, mode=mode, threshold=0.05)
    print(f"{mode}: {len(pred.actions)} actions above threshold")
    export_plots(pred,
                 os.path.join("demo_out", f"{mode}.csv"),
                 os.path.join("demo_out", f"{mode}.svg"),
                 ground_truth=sample.trajectory.waypoints)
print("wrote demo_out/prior.svg and demo_out/posterior.svg")
