"""Small end-to-end CLI pipeline shared by the CLI and determinism tests."""
from liverseg.cli import main

SMALL_CONFIG = """\
phantom.dims = 8 16 16
phantom.warp_magnitude = 1.0
model.input_dims = 8 16 16
model.hidden_dim = 32
model.transformer_layers = 1
augment.pyramid_levels = 1
augment.iterations_per_level = 3
train.epochs = {epochs}
train.lr0 = 0.003
"""


def run_pipeline(root, epochs=2, n=4, seed=0):
    """phantom gen -> augment (1 template) -> train -> predict -> evaluate under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(SMALL_CONFIG.format(epochs=epochs))
    c = ["--config", str(cfg)]
    steps = [
        ["phantom", "gen", "--n", str(n), "--seed", str(seed), "--out", str(root / "ph")] + c,
        ["augment", "--manifest", str(root / "ph" / "manifest.json"), "--templates", f"phantom_{seed:04d}",
         "--out", str(root / "aug")] + c,
        ["train", "--manifest", str(root / "aug" / "manifest.json"), "--out-run", str(root / "run")] + c,
        ["predict", "--checkpoint", str(root / "run" / "best"), "--in", str(root / "ph" / "manifest.json"),
         "--out", str(root / "pred")],
        ["evaluate", "--pred", str(root / "pred" / "manifest.json"), "--truth", str(root / "ph" / "manifest.json"),
         "--out", str(root / "report")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise RuntimeError(f"step {argv[0]} exited {code}")
    return {
        "log": (root / "run" / "log.csv").read_bytes(),
        "report_json": (root / "report.json").read_bytes(),
        "report_csv": (root / "report.csv").read_bytes(),
    }
