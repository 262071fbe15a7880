"""
Motion-language pretraining on encoded caption/motion pairs.
"""

import logging

from ...services.codec_service import tokens_to_motion
from ...services.language_model_service import (
    build_lm,
    build_pretrain_corpus,
    load_lm,
    pretrain,
    save_lm,
    with_training_config,
)
from ._base import PipelineCommand, read_streams

logger = logging.getLogger(__name__)

LM_DIR = 'lm'


class Command(PipelineCommand):
    help = 'Pretrain the language model with span corruption and caption/motion translation'

    def add_command_arguments(self, parser):
        parser.add_argument('--tokens', required=True, help='encode output directory of the training split')
        parser.add_argument('--steps', type=int, help='Pretraining steps (lm.pretrain_steps)')

    def run(self, config, out, options):
        if options.get('steps') is not None:
            config.lm.pretrain_steps = options['steps']
        vocab, streams, index = read_streams(options['tokens'])
        motions = [tokens_to_motion(ids, vocab) for ids in streams]
        corpus = build_pretrain_corpus([entry['caption'] for entry in index], motions, vocab)

        if options.get('checkpoint'):
            artifacts = with_training_config(load_lm(options['checkpoint']), config.lm)
        else:
            artifacts = build_lm(vocab, config.lm, seed=config.seed)
        result = pretrain(artifacts, corpus, config.codec, seed=config.seed, workers=config.workers,
                          loss_csv=out / 'loss.csv')
        save_lm(out / LM_DIR, result.artifacts)
        curve = result.loss_curve
        if curve:
            self.stdout.write(f"loss {curve[0]['loss']:.4f} -> {curve[-1]['loss']:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Language model saved to {out / LM_DIR}"))
        return {'tokens': str(options['tokens']), 'checkpoint': str(options.get('checkpoint') or '')}
