import argparse
import logging

from src.app.schemas import RunConfig
from src.app.services.sequences import write_sequences
from src.app.services.synthdata import generate_sequences
from src.app.settings import configure_logging

logger = logging.getLogger(__name__)


def run(config: str | None, out: str, count: int, seed: int, encoding: str):
    cfg = RunConfig.from_file(config) if config else RunConfig()
    sequences = generate_sequences(cfg.scenario, count, seed)
    paths = write_sequences(sequences, out, encoding)
    logger.info("Wrote %d sequences (%d frames) to %s", len(paths), sum(len(s) for s in sequences), out)


if __name__ == "__main__":
    configure_logging()
    parser = argparse.ArgumentParser(description="Write seeded synthetic tracking sequences")
    parser.add_argument("out")
    parser.add_argument("--config")
    parser.add_argument("--count", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--format", choices=["text", "binary"], default="binary")
    args = parser.parse_args()
    run(args.config, args.out, args.count, args.seed, args.format)
