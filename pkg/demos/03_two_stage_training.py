"""Two-stage training on synthetic data, end to end through the CLI.

Stage 1 trains a quarter-width model on strong labels; its predictions on
unlabelled clips become strong pseudo-labels, and stage 2 retrains from a
fresh initialization with those clips added. Use ``--epochs 200`` for the
full desk-scale run (about 13 minutes on one core); the default of 20 epochs
only exercises the plumbing and scores near zero.
"""

import argparse
import json
import tempfile
from pathlib import Path

from fdylka.cli import main
from fdylka.data_io import DESED_CLASSES

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=20)
ap.add_argument("--out", default=None)
args = ap.parse_args()

work = Path(args.out or tempfile.mkdtemp(prefix="fdylka_train_"))
work.mkdir(parents=True, exist_ok=True)


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


# %% Data: 20 strong clips plus 4 unlabelled ones
run("synthgen", "--clips", 24, "--classes", 3, "--unlabeled", 4, "--out", work / "syn")
run("featurize", "--audio-dir", work / "syn" / "audio", "--out", work / "feat")

# %% Recipe: supervised quotas, no augmentation, stub clip embeddings
config = {
    "classes": list(DESED_CLASSES[:3]),
    "embedding_source": "stub",
    "model": {"width_scale": 0.25},
    "train": {"epochs": args.epochs, "n_strong": 2, "n_weak": 0, "n_unlabeled": 0,
              "consistency_max_weight": 0.0, "augment": False, "validate_every": max(1, args.epochs // 4)},
}
(work / "run.json").write_text(json.dumps(config, indent=2))
strong = work / "syn" / "strong.tsv"
common = ["train", "--config", work / "run.json", "--features", work / "feat",
          "--strong", strong, "--validation", strong]

# %% Stage 1
run(*common, "--stage", 1, "--out", work / "stage1")
best1 = json.loads((work / "stage1" / "best_stage1.json").read_text())["student"]
print("stage 1 best student F1:", round(best1["f1"], 3), "at epoch", best1["epoch"])

# %% Pseudo-labels for the unlabelled clips
run("pseudolabel", "--checkpoints", best1["path"], "--clips", work / "syn" / "unlabeled.tsv",
    "--features", work / "feat", "--out", work / "pseudo.tsv")
print((work / "pseudo.tsv").read_text())

# %% Stage 2 and a final evaluation on the training clips
run(*common, "--stage", 2, "--pseudo", work / "pseudo.tsv", "--out", work / "stage2")
best2 = json.loads((work / "stage2" / "best_stage2.json").read_text())["student"]
run("predict", "--checkpoints", best2["path"], "--clips", strong, "--features", work / "feat",
    "--out", work / "pred.tsv")
run("evaluate", "--ref", strong, "--est", work / "pred.tsv")
print("outputs in", work)
