"""Evaluate the calibration losses and check their gradients numerically.

Run: python demos/04_losses.py
"""
import numpy as np

from calset.losses import (
    HPARAMS,
    combined_objective,
    conseq_loss,
    contrastive_loss,
    contrastive_loss_grad,
    length_normalized_score,
    margin_rank_loss,
    margin_rank_loss_grad,
    mle_loss,
)

hp = HPARAMS[("relevance", "clinical")]
# candidates sorted best-first by the quality metric; the model disagrees on the middle two
ranked = [[-0.4, -0.9, -0.3], [-1.5, -1.2, -1.9], [-1.1, -0.6, -0.8], [-2.0, -1.8, -2.4]]
scores = [length_normalized_score(lp, hp.scale, hp.length_penalty) for lp in ranked]
print("length-normalized scores (best first):", np.round(scores, 5))
rank = margin_rank_loss(scores, hp.lambda_margin)
print(f"margin rank loss {rank:.6f}; combined with MLE {combined_objective(mle_loss(ranked[0]), rank, hp.lambda_mle, hp.lambda_ca):.6f}")

g = margin_rank_loss_grad(scores, hp.lambda_margin)
h = 1e-6
fd = [(margin_rank_loss(np.add(scores, h * e), hp.lambda_margin) - margin_rank_loss(np.subtract(scores, h * e), hp.lambda_margin)) / (2 * h)
      for e in np.eye(len(scores))]
print("analytic grad", np.round(g, 6), "\nnumeric grad ", np.round(fd, 6))

rng = np.random.default_rng(0)
P, N = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
print(f"\ncontrastive loss {contrastive_loss(P, N, 1.0):.6f}")
Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
print(f"after a random rotation {contrastive_loss(P @ Q, N @ Q, 1.0):.6f}")
gP, gN = contrastive_loss_grad(P, N, 1.0)
print("grad norms:", np.linalg.norm(gP).round(6), np.linalg.norm(gN).round(6))

print(f"\nconseq loss {conseq_loss([-5.0, -6.0], [-4.0, -9.0]):.6f}")
