"""Write every preset as a fully expanded JSON config into ``configs/``."""

from pathlib import Path

from tabf.config import PRESETS, preset, save_config

if __name__ == "__main__":
    out = Path(__file__).resolve().parent.parent / "configs"
    out.mkdir(exist_ok=True)
    for name in sorted(PRESETS):
        save_config(preset(name), out / f"{name}.json")
        print(out / f"{name}.json")
