"""
Run one task with a tuned language model and a trained tokenizer.

Motion outputs are written as output.hoiseq, captions as caption.txt; the
generated token stream and a result summary (including the malformed flag)
are written alongside. Malformed generations get no motion file.
"""

import json
import logging

from ...services.codec_service import TaskKind, load_templates, stream_to_text
from ...services.config_service import ConfigError
from ...services.language_model_service import TaskRequest, load_lm, run_task
from ...services.tokenizer_service import load_tokenizer
from ...utils import file_formats
from ._base import PipelineCommand, load_object_models

logger = logging.getLogger(__name__)

TASK_ALIASES = {
    'text_to_hoi': TaskKind.TEXT_TO_HOI,
    'hoi_to_text': TaskKind.HOI_TO_TEXT,
    'prediction': TaskKind.PREDICTION,
    'predict': TaskKind.PREDICTION,
    'interpolation': TaskKind.INTERPOLATION,
    'interpolate': TaskKind.INTERPOLATION,
    'object_conditioned': TaskKind.OBJECT_CONDITIONED,
}


class Command(PipelineCommand):
    help = 'Run a generation task (text_to_hoi, hoi_to_text, prediction, interpolation, object_conditioned)'

    def add_command_arguments(self, parser):
        parser.add_argument('--task', required=True, choices=sorted(TASK_ALIASES))
        parser.add_argument('--tokenizer', required=True, help='Tokenizer checkpoint directory')
        parser.add_argument('--objects', required=True, help='Directory of object model files')
        parser.add_argument('--input', help='Input sequence file for motion-conditioned tasks')
        parser.add_argument('--caption', default='', help='Caption for text_to_hoi')
        parser.add_argument('--object', help='Object id when the caption names none')
        parser.add_argument('--mask-ratio', type=float, help='Interpolation mask ratio (codec.interpolation_ratio)')
        parser.add_argument('--mode', choices=['greedy', 'top_k'], help='Sampling mode (lm.sampling)')

    def run(self, config, out, options):
        kind = TASK_ALIASES[options['task']]
        if options.get('mask_ratio') is not None:
            config.codec.interpolation_ratio = options['mask_ratio']
            config.codec.validate()
        if kind != TaskKind.TEXT_TO_HOI and not options.get('input'):
            raise ConfigError(f"--input is required for {kind.value}", key='input')
        if kind == TaskKind.TEXT_TO_HOI and not options.get('caption'):
            raise ConfigError("--caption is required for text_to_hoi", key='caption')

        lm = load_lm(self.require_option(options, 'checkpoint'))
        tokenizer = load_tokenizer(options['tokenizer'])
        models = load_object_models(options['objects'])
        sequence = file_formats.read_hoiseq(file_formats.require(options['input'])) if options.get('input') else None
        request = TaskRequest(caption=options.get('caption') or '', sequence=sequence, object_id=options.get('object'))

        output = run_task(kind, request, lm, tokenizer, models, load_templates(), config.codec,
                          seed=config.seed, mode=options.get('mode'))
        if output.sequence is not None and not output.malformed:
            file_formats.write_hoiseq(out / 'output.hoiseq', output.sequence)
        elif output.sequence is not None:
            logger.warning(f"Not writing motion for malformed {kind.value} output: {output.generation.reason}")
        if output.caption is not None:
            file_formats.write_lines(out / 'caption.txt', [output.caption])
        generated = output.generation.ids if output.generation else []
        file_formats.write_lines(out / 'generation.txt', [stream_to_text(generated, lm.vocab)])
        summary = {
            'task': kind.value,
            'windows': len(output.triples),
            'malformed': output.malformed,
            'motion_written': output.sequence is not None and not output.malformed,
            'reason': output.generation.reason if output.generation else '',
        }
        (out / 'result.json').write_text(json.dumps(summary, sort_keys=True, indent=2) + '\n', encoding='utf-8')
        if output.malformed:
            self.stdout.write(self.style.WARNING(f"Malformed generation: {summary['reason']}"))
        self.stdout.write(self.style.SUCCESS(f"{kind.value} output written to {out}"))
        return {'checkpoint': options['checkpoint'], 'tokenizer': options['tokenizer'],
                'input': str(options.get('input') or '')}
