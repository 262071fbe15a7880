"""
Run the full desk-scale experiment end to end and collect the headline
numbers into one CSV:

    gen_data -> train_tokenizer (with and without geometric losses)
    -> encode -> decode -> train_matcher -> pretrain_lm -> tune_lm -> eval
"""

import csv
import logging
from pathlib import Path

from django.core.management import call_command

from ._base import HELDOUT_DIR, TRAIN_DIR, PipelineCommand

logger = logging.getLogger(__name__)

SUMMARY_FILE = 'summary.csv'


def _read_rows(path: Path):
    with open(path, newline='', encoding='utf-8') as fh:
        return list(csv.reader(fh))


class Command(PipelineCommand):
    help = 'Run the whole pipeline and write a summary report'

    def add_command_arguments(self, parser):
        parser.add_argument('--skip-ablation', action='store_true',
                            help='Do not train the tokenizer without geometric losses')
        parser.add_argument('--min-pairs', type=int, default=64, help='Minimum matcher training pairs')

    def _call(self, name: str, out: Path, options, **extra) -> Path:
        self.stdout.write(f"== {name} -> {out}")
        call_command(name, config=options.get('config'), seed=options.get('seed'),
                     workers=options.get('workers'), out=str(out), stdout=self.stdout, **extra)
        return out

    def run(self, config, out, options):
        data = self._call('gen_data', out / 'data', options)
        tokenizer_run = self._call('train_tokenizer', out / 'tokenizer', options, data=str(data))
        tokenizer = tokenizer_run / 'tokenizer'
        ablation = None
        if not options.get('skip_ablation'):
            ablation = self._call('train_tokenizer', out / 'tokenizer_no_geo', options, data=str(data), no_geo=True)

        train_tokens = self._call('encode', out / 'encoded_train', options, checkpoint=str(tokenizer),
                                  data=str(data / TRAIN_DIR))
        heldout_tokens = self._call('encode', out / 'encoded_heldout', options, checkpoint=str(tokenizer),
                                    data=str(data / HELDOUT_DIR), vocab=str(train_tokens / 'vocab.txt'))
        self._call('decode', out / 'decoded_heldout', options, checkpoint=str(tokenizer),
                   tokens=str(heldout_tokens), objects=str(data / 'objects'))
        matcher = self._call('train_matcher', out / 'matcher', options, data=str(data),
                             min_pairs=options['min_pairs'])
        pretrained = self._call('pretrain_lm', out / 'pretrain', options, tokens=str(train_tokens))
        tuned = self._call('tune_lm', out / 'tune', options, tokens=str(train_tokens),
                           checkpoint=str(pretrained / 'lm'))
        evaluation = self._call('eval', out / 'eval', options, data=str(data), checkpoint=str(tuned / 'lm'),
                                tokenizer=str(tokenizer), matcher=str(matcher / 'matcher'))

        summary = [['section', 'name', 'value']]
        for label, run_dir in (('tokenizer', tokenizer_run), ('tokenizer_no_geo', ablation)):
            if run_dir is None:
                continue
            header, *rows = _read_rows(run_dir / 'reconstruction.csv')
            for row in rows:
                for column, value in zip(header[1:], row[1:]):
                    summary.append([label, f"{row[0]}_{column}", value])
        header, *rows = _read_rows(evaluation / 'eval.csv')
        for row in rows:
            summary.append(['eval', row[0], row[header.index('mean')]])

        with open(out / SUMMARY_FILE, 'w', newline='', encoding='utf-8') as fh:
            csv.writer(fh, lineterminator='\n').writerows(summary)
        self.stdout.write(self.style.SUCCESS(f"Report written to {out / SUMMARY_FILE}"))
        return {}
