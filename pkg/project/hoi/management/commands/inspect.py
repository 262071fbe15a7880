"""
Inspect a tokenizer checkpoint and token-stream files: per-codebook usage
histograms and perplexity, and grammar validation of every stream.
"""

import csv
import logging
from pathlib import Path

import numpy as np

from ...services.codec_service import CodecError, Vocabulary, text_to_stream, validate_stream
from ...services.quantizer_service import codebook_usage
from ...services.tokenizer_service import load_tokenizer
from ...utils import file_formats
from ._base import TOKENS_FILE, VOCAB_FILE, PipelineCommand

logger = logging.getLogger(__name__)

HISTOGRAM_ROWS = 10
BAR_WIDTH = 40


class Command(PipelineCommand):
    help = 'Print codebook usage and validate token-stream files'

    def add_command_arguments(self, parser):
        parser.add_argument('--tokens', nargs='*', default=[],
                            help='encode output directories or token-stream files to validate')
        parser.add_argument('--vocab', help='Vocabulary file for bare token-stream files')

    def _histogram(self, title: str, histogram: np.ndarray, perplexity: float) -> None:
        used = int((histogram > 0).sum())
        self.stdout.write(f"{title}: {used}/{len(histogram)} codes used, perplexity {perplexity:.2f}")
        top = np.argsort(-histogram, kind='stable')[:HISTOGRAM_ROWS]
        peak = max(int(histogram.max()), 1)
        for index in top:
            if histogram[index] == 0:
                break
            bar = '#' * max(1, int(BAR_WIDTH * histogram[index] / peak))
            self.stdout.write(f"  {index:>5} {int(histogram[index]):>7} {bar}")

    def run(self, config, out, options):
        artifacts = load_tokenizer(self.require_option(options, 'checkpoint'))
        hand_tokens, object_tokens = [], []
        validation = []

        for item in options['tokens']:
            path = file_formats.require(item)
            stream_file = path / TOKENS_FILE if path.is_dir() else path
            vocab_file = path / VOCAB_FILE if path.is_dir() else options.get('vocab')
            if not vocab_file:
                raise file_formats.MissingArtifact(f"No vocabulary for {path}; pass --vocab", path)
            vocab = Vocabulary.load(file_formats.require(vocab_file))
            for number, line in enumerate(file_formats.read_lines(file_formats.require(stream_file)), start=1):
                try:
                    ids = text_to_stream(line, vocab)
                    validate_stream(ids, vocab, allow_mask=True)
                except CodecError as e:
                    validation.append([str(stream_file), number, 'malformed', str(e)])
                    continue
                validation.append([str(stream_file), number, 'ok', ''])
                hand_tokens.extend(vocab.hand_index(t) for t in ids if vocab.is_hand(t))
                object_tokens.extend(vocab.object_index(t) for t in ids if vocab.is_object(t))

        usage_rows = []
        for title, book, tokens in (('hand', artifacts.hand_codebook, hand_tokens),
                                    ('object', artifacts.object_codebook, object_tokens)):
            if tokens:
                histogram, perplexity = codebook_usage(book, tokens)
            else:
                # Without streams, the EMA cluster sizes stand in for usage.
                counts = np.asarray(book.ema_counts, dtype=np.float64)
                histogram = np.round(counts).astype(np.int64)
                probs = counts / max(counts.sum(), 1e-12)
                perplexity = float(np.exp(-np.sum(probs[probs > 0] * np.log(probs[probs > 0]))))
            self._histogram(title, histogram, perplexity)
            usage_rows.extend([title, i, int(c)] for i, c in enumerate(histogram))
            usage_rows.append([title, 'perplexity', repr(perplexity)])

        with open(out / 'usage.csv', 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['codebook', 'index', 'count'])
            writer.writerows(usage_rows)
        if validation:
            with open(out / 'validation.csv', 'w', newline='', encoding='utf-8') as fh:
                writer = csv.writer(fh, lineterminator='\n')
                writer.writerow(['file', 'line', 'status', 'detail'])
                writer.writerows(validation)
            bad = sum(1 for row in validation if row[2] != 'ok')
            style = self.style.WARNING if bad else self.style.SUCCESS
            self.stdout.write(style(f"Validated {len(validation)} streams: {bad} malformed"))
        return {'checkpoint': options['checkpoint'], 'tokens': ' '.join(str(Path(t)) for t in options['tokens'])}
