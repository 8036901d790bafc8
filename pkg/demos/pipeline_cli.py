# %% [markdown]
# End-to-end run through the command line entry point with deliberately small settings.

# %%
import tempfile
from pathlib import Path

from carfollow import cli
from carfollow.evaluation import read_rows

out = Path(tempfile.mkdtemp()) / "run"
small = ["--out-dir", str(out), "--n-episodes", "40", "--seeds", "0-1", "--n-states", "6", "--h-max", "8",
         "--aida-steps", "30", "--bc-epochs", "10", "--cem-iterations", "5", "--k-codebook", "6"]

# %%
assert cli.main(["synth", *small]) == 0
for model in ("idm", "bc-mlp", "aida"):
    assert cli.main(["train", "--model", model, *small]) == 0
    assert cli.main(["evaluate", "--model", model, "--suites", "offline", *small]) == 0

# %%
assert cli.main(["report", *small]) == 0
for row in read_rows(out / "report" / "summary.csv"):
    if row["metric"] == "mae_iqm":
        print(row)
print((out / "report" / "param_counts.csv").read_text())
