"""Metric sanity checks and the two masking pitfalls.

First the metric identities worth memorizing, then the protocol traps:
frozen evaluation masks (so model selection compares like with like) and
the static-sequence bias check that tells you whether copy-forward is
already close to the answer on a cohort.

Run: python3 demos/metrics_and_masking.py
"""

import numpy as np

from flowcast import (
    DynamicsSpec,
    SequenceShape,
    generate_cohort,
    generate_masks,
    mse,
    nrmse,
    psnr,
    ssim,
)
from flowcast.synthetic import static_bias_report


def main() -> None:
    rng = np.random.default_rng(9)
    a = rng.random((4, 32, 32))
    b = rng.random((4, 32, 32))

    print("identities:")
    print(f"  ssim(a, a) = {ssim(a, a)}")
    print(f"  psnr(a, a) = {psnr(a, a)}")
    print(f"  mse symmetric: {mse(a, b) == mse(b, a)}")
    print(f"  nrmse survives affine rescaling of both images: "
          f"{np.isclose(nrmse(5 * a + 2, 5 * b + 2), nrmse(a, b))}")

    print("\nfrozen masks: same seed, same bits, every epoch")
    m1 = generate_masks(4, 5, 0.5, seed=123)
    m2 = generate_masks(4, 5, 0.5, seed=123)
    print("  regeneration identical:", np.array_equal(m1.keep, m2.keep))
    print("  kept frames per sample:", m1.keep.sum(axis=1).tolist(),
          "(never zero; the latest slot is forced when a draw empties a row)")

    shape = SequenceShape(4, 2, 32, 32)
    moving = generate_cohort(DynamicsSpec("growing_disk", shape, growth_rate=5.0, seed=3), 8)
    frozen = generate_cohort(DynamicsSpec("growing_disk", shape, growth_rate=0.0, seed=3), 8)

    print("\nstatic-sequence bias check (copy-forward NRMSE / cross-patient NRMSE):")
    for label, cohort in (("growing disks", moving), ("static disks", frozen)):
        report = static_bias_report(cohort)
        print(f"  {label:14s} ratio {report.ratio:.3f}  "
              f"(copy-forward {report.lci_mean:.4f}, cross-patient {report.paired_mean:.4f})")
    print("  near 0 means the last frame is essentially the answer already;")
    print("  forecasting only looks impressive on such a cohort until you check this.")


if __name__ == "__main__":
    main()
