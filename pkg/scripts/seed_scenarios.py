"""
Script to write the built-in scenarios as JSON files.
"""
import sys
import json
import logging
import argparse
from pathlib import Path

# Add the parent directory to the path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from fairshare.scenarios import BUILTIN_SPECS, builtin_scenarios, random_region_spec

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def seed_scenarios(target: Path, overwrite: bool = False, random_seeds=()):
    """Write every built-in scenario (and optional random regions) into target."""
    target.mkdir(parents=True, exist_ok=True)
    # validates every spec before anything is written
    builtin_scenarios()

    specs = {name: {"name": name, **spec} for name, spec in BUILTIN_SPECS.items()}
    for seed in random_seeds:
        spec = random_region_spec(seed)
        specs[spec["name"]] = spec

    written = 0
    for name, spec in specs.items():
        path = target / f"{name}.json"
        if path.exists() and not overwrite:
            logger.info(f"Skipping {path.name}, already present")
            continue
        path.write_text(json.dumps(spec, indent=2) + "\n")
        logger.info(f"Wrote scenario: {path.name}")
        written += 1

    logger.info(f"✅ Successfully wrote {written} scenarios to {target}")
    return written


def main():
    parser = argparse.ArgumentParser(description="Write the built-in scenario catalogue as JSON")
    parser.add_argument("--dir", type=Path, default=DEFAULT_DIR, help="Target directory")
    parser.add_argument("--overwrite", action="store_true", help="Replace existing files")
    parser.add_argument("--random", type=int, nargs="*", default=[], metavar="SEED", help="Also write random regions")
    args = parser.parse_args()

    seed_scenarios(args.dir, overwrite=args.overwrite, random_seeds=args.random)


if __name__ == "__main__":
    main()
