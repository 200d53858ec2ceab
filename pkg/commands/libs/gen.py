from pathlib import Path

from commands.base import BaseCommand, CommandResult, synthetic_qkv
from core.config import Config, RunConfig
from core.errors import TensorIOError
from core.log import get_logger
from core.tensors import save_tensor

logger = get_logger(__name__)


def head_files(directory: Path, head: int):
    return {name: directory / f"{name}_h{head}.stt" for name in ("q", "k", "v")}


class GenCommand(BaseCommand):
    name = "gen"
    description = "Write seeded synthetic Q/K/V tensor files, one triple per head, and print a JSON manifest."

    def run(self, config: RunConfig) -> CommandResult:
        out_dir = Path(config.output_dir or Config.DIRS["artifacts"])
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise TensorIOError(f"cannot create output directory '{out_dir}': {e.strerror or e}") from e

        written = []
        for head in range(config.heads):
            tensors = synthetic_qkv(config, config.seed, head)
            for name, path in head_files(out_dir, head).items():
                save_tensor(getattr(tensors, name), path)
                written.append(str(path))
            logger.debug("head %d written to %s", head, out_dir)

        manifest = {
            "n": config.n,
            "d": config.d,
            "heads": config.heads,
            "seed": config.seed,
            "generator": config.generator,
            "files": written,
        }
        logger.info("generated %d tensor files in %s", len(written), out_dir)
        return self.ok(self.to_json(manifest), files=written)
