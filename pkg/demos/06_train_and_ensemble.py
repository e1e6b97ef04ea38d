"""
Training on phantoms and running the self-ensemble
==================================================

A small conditional-instance-norm net is trained with contrast dropout on a
seeded phantom cohort, then applied to held-out subjects through all 24
orientation transforms. Removing FLAIR or adding artifacts shows how the
prediction holds up. Takes a few minutes on one CPU core.
"""
import warnings

import numpy as np

from uniself import fusion
from uniself.metrics import evaluate_cohort
from uniself.phantom import CorruptionSpec, PhantomConfig, corrupt, generate
from uniself.tinynet import NetConfig, TrainConfig, train

warnings.simplefilter("ignore")  # single-lesion corner cases make volume correlation undefined

cohort = generate(PhantomConfig(n_subjects=10, seed=5))
train_set, test = cohort[:7], cohort[7:]
net, losses = train([s.as_tuple() for s in train_set], TrainConfig(lr=3e-3, iterations=600, seed=5),
                    mode="condin", net_cfg=NetConfig(norm="condin", seed=5))
print(f"loss: first {losses[0]:.4f}  last-20 mean {np.mean(losses[-20:]):.4f}")


def evaluate(spec=None):
    preds = []
    for i, s in enumerate(test):
        mcv = s.mcv if spec is None else corrupt(s.mcv, spec, i)
        cmap = fusion.self_ensemble_predict(mcv, net, stats="instance_stats")
        preds.append(fusion.fuse(cmap, fusion.FusionParams(16, 7)))
    r = evaluate_cohort(preds, [s.rater1 for s in test], [s.rater2 for s in test])
    return f"score {r.score:.3f}  dsc {r.dsc:.3f}  ltpr {r.ltpr:.3f}  lfpr {r.lfpr:.3f}"


print("all contrasts  :", evaluate())
print("FLAIR removed  :", evaluate(CorruptionSpec("drop_contrast", target="FLAIR")))
print("FLAIR bias 0.3 :", evaluate(CorruptionSpec("bias_field", 0.3)))
print("FLAIR gamma 1.5:", evaluate(CorruptionSpec("gamma", 1.5)))
