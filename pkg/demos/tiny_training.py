"""End-to-end training on a miniature growing-disk cohort.

Everything stays in memory: generate 24 patients, train the velocity
field for a couple of minutes of CPU, then compare the learned forecast
against copy-forward on held-out patients. The point is the workflow,
not the scores; see the experiment CLI for the full-size runs.

Run: python3 demos/tiny_training.py
"""

import numpy as np
import torch

from flowcast import (
    DynamicsSpec,
    ModelConfig,
    SequenceShape,
    SolverConfig,
    TrainConfig,
    VelocityUNet,
    fit,
    generate_cohort,
    generate_masks,
    last_context_image,
    mask_sequence,
    mse,
)
from flowcast.training import method_forecasts

torch.set_num_threads(1)


def main() -> None:
    spec = DynamicsSpec(
        "growing_disk", SequenceShape(3, 2, 16, 16), growth_rate=1.5, seed=11
    )
    cohort = generate_cohort(spec, 24)
    train_seqs, val_seqs, test_seqs = cohort[:16], cohort[16:20], cohort[20:]

    model = VelocityUNet(
        ModelConfig(in_frames=3, base_features=8, channel_mults=(1, 2), attention_resolution=8),
        spec.shape.volume,
        seed=1,
    )
    solver = SolverConfig(method="euler", steps=10, reduction="last")
    val_masks = generate_masks(len(val_seqs), spec.shape.n_frames, 0.4, seed=20)

    cfg = TrainConfig(epochs=30, batch_size=4, learning_rate=1e-3, seed=2)
    print(f"training {sum(p.numel() for p in model.parameters())} parameters "
          f"for {cfg.epochs} epochs...")
    result = fit(
        model, cfg, train_seqs, val_seqs, val_masks, solver,
        train_mask_rate=0.4,
        progress=lambda r: print(
            f"  epoch {r.epoch:2d}  train {r.train_loss:.5f}  val mse {r.val_mse:.5f}"
        ) if r.epoch % 5 == 0 else None,
    )
    print(f"best epoch {result.best_epoch} at val mse {result.best_val_mse:.5f}")

    model.load_state_dict(result.best_state)
    test_masks = generate_masks(len(test_seqs), spec.shape.n_frames, 0.4, seed=30)
    masked = [mask_sequence(s, test_masks.keep[i]) for i, s in enumerate(test_seqs)]
    preds = method_forecasts(model, masked, solver)

    model_mse = float(np.mean([mse(p, s.target) for p, s in zip(preds, test_seqs)]))
    lci_mse = float(np.mean(
        [mse(last_context_image(s), orig.target) for s, orig in zip(masked, test_seqs)]
    ))
    print(f"\nheld-out test mse: learned flow {model_mse:.5f}  vs  copy-forward {lci_mse:.5f}")


if __name__ == "__main__":
    main()
