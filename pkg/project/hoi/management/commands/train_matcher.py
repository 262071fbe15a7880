"""
Train the contrastive motion/text matcher that supplies evaluation features.
"""

import logging

from ...services.codec_service import build_vocabulary
from ...services.evaluation_service import save_matcher, train_matcher
from ...services.language_model_service import write_curve
from ...utils.file_formats import read_dataset
from ._base import PipelineCommand, data_paths

logger = logging.getLogger(__name__)

MATCHER_DIR = 'matcher'


class Command(PipelineCommand):
    help = 'Train the evaluation feature extractor on captioned sequences'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='gen_data output directory')
        parser.add_argument('--min-pairs', type=int, default=64, help='Minimum training pairs')

    def run(self, config, out, options):
        paths = data_paths(options['data'])
        train = read_dataset(paths['train'])
        heldout = read_dataset(paths['heldout']) if paths['heldout'].exists() else []
        # Codebook sizes are irrelevant to captions; the matcher only embeds word ids.
        vocab = build_vocabulary([s.caption for s in train], 1, 1, sentinels=0)
        result = train_matcher(train, vocab, config.eval, seed=config.seed, heldout=heldout or None,
                               min_pairs=options['min_pairs'])
        save_matcher(out / MATCHER_DIR, result.artifacts)
        write_curve(out / 'loss.csv', result.loss_curve, ('epoch', 'loss'))
        self.stdout.write(self.style.SUCCESS(
            f"Matcher saved to {out / MATCHER_DIR} (matched {result.matched_distance:.4f}, "
            f"unmatched {result.unmatched_distance:.4f})"
        ))
        return {'data': str(options['data'])}
