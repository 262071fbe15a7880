"""
Instruction-tune the language model on all five tasks built from encoded
training streams.
"""

import logging

from ...services.codec_service import TaskInputs, load_templates, tokens_to_motion
from ...services.language_model_service import (
    build_lm,
    instruction_tune,
    load_lm,
    save_lm,
    task_examples,
    with_training_config,
)
from ._base import PipelineCommand, read_streams

logger = logging.getLogger(__name__)

LM_DIR = 'lm'


class Command(PipelineCommand):
    help = 'Instruction-tune the language model'

    def add_command_arguments(self, parser):
        parser.add_argument('--tokens', required=True, help='encode output directory of the training split')
        parser.add_argument('--epochs', type=int, help='Tuning epochs (lm.tune_epochs)')

    def run(self, config, out, options):
        if options.get('epochs') is not None:
            config.lm.tune_epochs = options['epochs']
        if options.get('checkpoint'):
            artifacts = with_training_config(load_lm(options['checkpoint']), config.lm)
            vocab, streams, index = read_streams(options['tokens'], artifacts.vocab)
        else:
            vocab, streams, index = read_streams(options['tokens'])
            artifacts = build_lm(vocab, config.lm, seed=config.seed)

        pairs = [TaskInputs(caption=entry['caption'], triples=tokens_to_motion(ids, vocab))
                 for ids, entry in zip(streams, index)]
        examples = task_examples(pairs, vocab, load_templates(), config.codec, seed=config.seed)
        result = instruction_tune(artifacts, examples, seed=config.seed, workers=config.workers,
                                  loss_csv=out / 'loss.csv')
        save_lm(out / LM_DIR, result.artifacts)
        self.stdout.write(self.style.SUCCESS(
            f"Tuned on {len(examples)} examples; model saved to {out / LM_DIR}"
        ))
        return {'tokens': str(options['tokens']), 'checkpoint': str(options.get('checkpoint') or '')}
