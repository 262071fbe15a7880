"""
Evaluate a tuned language model on the held-out split: FID, Diversity,
MModality, R-Precision, MMDist, ADE/FDE (with the freeze-last-frame
baseline) and IV, repeated with derived seeds for confidence intervals.
"""

import logging

from ...services.codec_service import load_templates
from ...services.evaluation_service import evaluate, format_table, load_matcher, write_report_csv
from ...services.language_model_service import load_lm
from ...services.tokenizer_service import load_tokenizer
from ...utils.file_formats import read_dataset
from ._base import PipelineCommand, data_paths, load_object_models

logger = logging.getLogger(__name__)

REPORT_FILE = 'eval.csv'
REPEAT_SEED_STRIDE = 7919


class Command(PipelineCommand):
    help = 'Compute the evaluation metric suite'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='gen_data output directory (held-out split is used)')
        parser.add_argument('--tokenizer', required=True, help='Tokenizer checkpoint directory')
        parser.add_argument('--matcher', required=True, help='Matcher checkpoint directory')
        parser.add_argument('--repeats', type=int, help='Evaluation repeats (eval.repeats)')

    def run(self, config, out, options):
        if options.get('repeats') is not None:
            config.eval.repeats = options['repeats']
            config.eval.validate()
        paths = data_paths(options['data'])
        heldout = read_dataset(paths['heldout'])
        models = load_object_models(paths['objects'])
        lm = load_lm(self.require_option(options, 'checkpoint'))
        tokenizer = load_tokenizer(options['tokenizer'])
        matcher = load_matcher(options['matcher'])
        templates = load_templates()

        reports = []
        for r in range(config.eval.repeats):
            seed = config.seed + REPEAT_SEED_STRIDE * r
            logger.info(f"Evaluation repeat {r + 1}/{config.eval.repeats} (seed {seed})")
            reports.append(evaluate(heldout, lm, tokenizer, matcher, models, templates, config.eval,
                                    config.codec, seed=seed))
        write_report_csv(out / REPORT_FILE, reports)
        self.stdout.write(format_table(reports))
        return {'data': options['data'], 'checkpoint': options['checkpoint'],
                'tokenizer': options['tokenizer'], 'matcher': options['matcher']}
