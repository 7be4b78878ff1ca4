"""
==============================
The pipeline from the shell
==============================

Each block below is one ``fusionscope`` invocation; the script calls the
same entry point in-process so it can be run as a file. Run it from the
``demos/`` directory: the dataset is written next to ``blobs.toml``.
"""

# %%
# Generate the data the config points at

from pathlib import Path

from fusionscope.harness.cli import main
from fusionscope.synthetic import write_blob_dataset

here = Path(__file__).resolve().parent
write_blob_dataset(here / "blobs", n_images=400, seed=0)
config = str(here / "blobs.toml")


def sh(*argv):
    print("$ fusionscope", " ".join(argv))
    code = main(list(argv))
    if code:
        raise SystemExit(code)


# %%
# Folds, then training of one fold (drop ``--fold`` for all five)

sh("prepare-folds", "--config", config)
sh("train", "--config", config, "--fold", "0")

# %%
# Classification reports, saliency export and XAI scores

sh("evaluate", "--config", config)
sh("saliency", "--config", config, "--source", "fusion_gate", "--overlay", "--limit", "8")
sh("xai-eval", "--config", config, "--method", "fusion_gate", "--workers", "2")
sh("xai-eval", "--config", config, "--method", "local")

# %%
# Plot-ready tables under runs/blobs/report/

sh("report", "--config", config)
print((here / "runs" / "blobs" / "report" / "coherence.csv").read_text())
