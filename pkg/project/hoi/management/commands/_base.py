"""
Shared plumbing for the pipeline commands: common flags, config loading,
output directory bookkeeping and error reporting.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ...services.codec_service import CodecError, Vocabulary, text_to_stream
from ...services.config_service import ConfigError, RunConfig, load_run_config
from ...services.evaluation_service import EvaluationError
from ...services.geometry_service import GeometryError
from ...services.kinematics_service import KinematicsError, ObjectModel, load_object_model
from ...services.language_model_service import LanguageModelError
from ...services.quantizer_service import QuantizerError
from ...services.tokenizer_service import TokenizerError
from ...nn.tensor import AutodiffError
from ...utils import file_formats
from ...utils.file_formats import FileFormatError
from ...utils.run_utils import write_config_echo, write_run_manifest

logger = logging.getLogger(__name__)

PIPELINE_ERRORS = (
    ConfigError, FileFormatError, KinematicsError, GeometryError, AutodiffError, QuantizerError,
    TokenizerError, CodecError, LanguageModelError, EvaluationError,
)

OBJECTS_DIR = 'objects'
TRAIN_DIR = 'train'
HELDOUT_DIR = 'heldout'
TOKENS_FILE = 'tokens.txt'
INDEX_FILE = 'index.json'
VOCAB_FILE = 'vocab.txt'


def error_line(error: Exception) -> str:
    """Single structured line: error=<Class> key=<key or path> detail=<message>."""
    key = getattr(error, 'key', '') or ''
    return f"error={type(error).__name__} key={key} detail={error}"


class PipelineCommand(BaseCommand):
    """
    Base for every pipeline command.

    Subclasses implement `run(config, out, options)` and may return a
    mapping of input names to paths for the run manifest.
    """
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON run configuration file')
        parser.add_argument('--seed', type=int, help='Global seed (overrides the config file)')
        parser.add_argument('--out', help='Output directory')
        parser.add_argument('--workers', type=int, help='Threads per command')
        parser.add_argument('--checkpoint', help='Input checkpoint directory')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    @property
    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def handle(self, *args, **options):
        try:
            config = load_run_config(options.get('config'),
                                     {'seed': options.get('seed'), 'workers': options.get('workers')})
            out = Path(options.get('out') or config.out
                       or Path(getattr(settings, 'HOI_OUTPUT_ROOT')) / self.command_name)
            out.mkdir(parents=True, exist_ok=True)
            logger.info(f"{self.command_name}: seed={config.seed} workers={config.workers} out={out}")
            inputs = self.run(config, out, options) or {}
            write_config_echo(out, config)
            write_run_manifest(out, self.command_name, config.seed, inputs)
        except PIPELINE_ERRORS as e:
            logger.error(error_line(e))
            raise CommandError(error_line(e))

    def run(self, config: RunConfig, out: Path, options) -> Optional[Dict[str, str]]:
        raise NotImplementedError

    # Shared loaders

    def require_option(self, options, name: str) -> str:
        value = options.get(name)
        if not value:
            raise ConfigError(f"--{name.replace('_', '-')} is required", key=name)
        return value


def load_object_models(directory) -> Dict[str, ObjectModel]:
    directory = file_formats.require(directory)
    models = {}
    for path in sorted(directory.glob('*.obj')):
        model = load_object_model(path)
        models[model.name] = model
    if not models:
        raise file_formats.MissingArtifact(f"No object models in {directory}", directory)
    return models


def data_paths(data_dir) -> Dict[str, Path]:
    """train/, heldout/ and objects/ under a gen_data output directory."""
    root = file_formats.require(data_dir)
    return {'train': root / TRAIN_DIR, 'heldout': root / HELDOUT_DIR, 'objects': root / OBJECTS_DIR}


def write_streams(directory: Path, lines: List[str], index: List[dict]) -> None:
    file_formats.write_lines(directory / TOKENS_FILE, lines)
    (directory / INDEX_FILE).write_text(json.dumps(index, sort_keys=True, indent=2) + '\n', encoding='utf-8')


def read_streams(directory, vocab: Optional[Vocabulary] = None):
    """
    Token streams and their index from an encode output directory.

    Returns:
        (vocabulary, list of id lists, index entries)
    """
    directory = file_formats.require(directory)
    vocab = vocab or Vocabulary.load(file_formats.require(directory / VOCAB_FILE))
    lines = file_formats.read_lines(file_formats.require(directory / TOKENS_FILE))
    index = json.loads(file_formats.require(directory / INDEX_FILE).read_text(encoding='utf-8'))
    if len(index) != len(lines):
        raise FileFormatError(f"{len(lines)} streams but {len(index)} index entries", directory)
    return vocab, [text_to_stream(line, vocab) for line in lines], index

