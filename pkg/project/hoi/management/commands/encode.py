"""
Encode sequences to motion token streams with a trained tokenizer.

Writes tokens.txt (one stream per line), index.json (source, object,
caption and frame count per line) and the vocabulary the streams use.
"""

import logging

from ...services.codec_service import (
    Vocabulary,
    build_vocabulary,
    load_templates,
    motion_to_tokens,
    stream_to_text,
)
from ...services.tokenizer_service import encode_sequence, load_tokenizer
from ...utils import file_formats
from ._base import VOCAB_FILE, PipelineCommand, write_streams

logger = logging.getLogger(__name__)


class Command(PipelineCommand):
    help = 'Encode HOI sequences into token streams'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Sequence file or directory of sequences')
        parser.add_argument('--vocab', help='Existing vocabulary file to reuse')

    def run(self, config, out, options):
        checkpoint = self.require_option(options, 'checkpoint')
        artifacts = load_tokenizer(checkpoint)
        source = file_formats.require(options['data'])
        paths = [source] if source.is_file() else sorted(source.glob('*.hoiseq'))
        sequences = [file_formats.read_hoiseq(p) for p in paths]

        if options.get('vocab'):
            vocab = Vocabulary.load(file_formats.require(options['vocab']))
        else:
            vocab = build_vocabulary([s.caption for s in sequences], artifacts.hand_codebook.size,
                                     artifacts.object_codebook.size, load_templates(), config.codec.sentinels)
        vocab.save(out / VOCAB_FILE)

        lines, index = [], []
        for path, sequence in zip(paths, sequences):
            stream = motion_to_tokens(encode_sequence(sequence, artifacts), vocab)
            lines.append(stream_to_text(stream.ids, vocab))
            index.append({'source': str(path), 'object': sequence.object_id, 'caption': sequence.caption,
                          'frames': sequence.num_frames, 'fps': sequence.fps, 'seed': sequence.seed})
        write_streams(out, lines, index)
        self.stdout.write(self.style.SUCCESS(f"Encoded {len(lines)} sequences to {out}"))
        return {'checkpoint': str(checkpoint), 'data': str(options['data'])}
