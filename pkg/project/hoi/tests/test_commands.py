"""
Tests for the pipeline management commands.
Runs the cheap commands end to end on tiny inputs and checks the shared
config, manifest and error-reporting plumbing.
"""

import csv
import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from hoi.management.commands._base import error_line
from hoi.services.codec_service import TaskKind
from hoi.services.config_service import ConfigError, TokenizerConfig
from hoi.services.dataset_service import constant_velocity_sequence
from hoi.services.kinematics_service import build_object_model, save_object_model
from hoi.services.language_model_service import Generation, TaskOutput
from hoi.services.tokenizer_service import build_artifacts, save_tokenizer
from hoi.utils.file_formats import MissingArtifact, read_hoiseq, write_dataset
from hoi.utils.run_utils import CONFIG_ECHO, RUN_MANIFEST

SMALL_DATA = {
    'kinematics': {
        'count': 2,
        'objects': ['cube'],
        'scripts': ['grasp'],
        'length_range': [40, 40],
        'sample_count': 200,
        'point_count': 32,
        'heldout_fraction': 0.5,
    },
}


class CommandTestMixin:
    def setUp(self):
        """Set up test fixtures"""
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        """Clean up after tests"""
        self.tmp.cleanup()

    def write_config(self, data, name='run.json'):
        path = self.dir / name
        path.write_text(json.dumps(data), encoding='utf-8')
        return str(path)

    def call(self, name, **options):
        stdout = StringIO()
        call_command(name, stdout=stdout, **options)
        return stdout.getvalue()


TINY_TOKENIZER = dict(SMALL_DATA, tokenizer={
    'epochs': 1, 'batch_size': 8, 'codebook_size': 8, 'latent_dim': 8, 'hidden': 16,
    'window': 4, 'handedness_dim': 4, 'log_every': 1,
})


class ErrorLineTestCase(SimpleTestCase):
    """Test cases for the structured error line"""

    def test_format(self):
        """Test class, key and detail fields"""
        self.assertEqual(error_line(ConfigError('bad value', key='lm.heads')),
                         'error=ConfigError key=lm.heads detail=bad value')
        self.assertEqual(error_line(MissingArtifact('gone', '/tmp/x')),
                         'error=MissingArtifact key=/tmp/x detail=gone')
        self.assertEqual(error_line(ValueError('plain')), 'error=ValueError key= detail=plain')


class GenDataCommandTestCase(CommandTestMixin, SimpleTestCase):
    """Test cases for gen_data"""

    def test_outputs_and_manifest(self):
        """Test dataset layout, config echo and manifest"""
        out = self.dir / 'data'
        message = self.call('gen_data', config=self.write_config(SMALL_DATA), out=str(out), seed=3)
        self.assertIn('held-out sequences', message)
        self.assertTrue((out / 'objects' / 'cube.obj').is_file())
        self.assertTrue((out / 'train').is_dir())
        self.assertTrue((out / 'heldout').is_dir())
        manifest = json.loads((out / RUN_MANIFEST).read_text(encoding='utf-8'))
        self.assertEqual((manifest['command'], manifest['seed']), ('gen_data', 3))
        self.assertIn('objects/cube.obj', manifest['checksums'])
        echo = json.loads((out / CONFIG_ECHO).read_text(encoding='utf-8'))
        self.assertEqual(echo['kinematics']['count'], 2)

    def test_rerun_is_byte_identical(self):
        """Test two runs with the same seed write identical manifests"""
        config = self.write_config(SMALL_DATA)
        self.call('gen_data', config=config, out=str(self.dir / 'a'), seed=5)
        self.call('gen_data', config=config, out=str(self.dir / 'b'), seed=5)
        self.assertEqual((self.dir / 'a' / RUN_MANIFEST).read_bytes(), (self.dir / 'b' / RUN_MANIFEST).read_bytes())

    @mock.patch('hoi.management.commands.gen_data.generate_synthetic_dataset', return_value=[])
    def test_flags_reach_the_generator(self, mock_generate):
        """Test --seed, --workers and --count override the config"""
        self.call('gen_data', config=self.write_config(SMALL_DATA), out=str(self.dir / 'c'),
                  seed=7, workers=2, count=1)
        args = mock_generate.call_args.args
        self.assertEqual(args[0].count, 1)
        self.assertEqual((args[1], args[3]), (7, 2))

    def test_invalid_config_reports_key(self):
        """Test config errors surface as a structured CommandError"""
        config = self.write_config({'kinematics': {'counts': 3}})
        with self.assertRaisesMessage(CommandError, 'error=ConfigError key=kinematics.counts'):
            self.call('gen_data', config=config, out=str(self.dir / 'd'))


class TrainTokenizerCommandTestCase(CommandTestMixin, SimpleTestCase):
    """Test cases for train_tokenizer"""

    def test_geometry_report_has_one_row_per_sequence(self):
        """Test geo.csv header and one row for every train and held-out sequence"""
        config = self.write_config(TINY_TOKENIZER)
        data = self.dir / 'data'
        self.call('gen_data', config=config, out=str(data), seed=3)
        out = self.dir / 'tok'
        self.call('train_tokenizer', config=config, data=str(data), out=str(out), seed=3)

        with open(out / 'geo.csv', newline='', encoding='utf-8') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['seq_id', 'l_pen', 'l_c', 'l_r', 'l_geo', 'iv_count', 'iv_max_depth'])
        train = sorted((data / 'train').glob('*.hoiseq'))
        heldout = sorted((data / 'heldout').glob('*.hoiseq'))
        self.assertEqual(len(rows) - 1, len(train) + len(heldout))
        self.assertEqual(rows[1][0], 'train/00000')
        for row in rows[1:]:
            with self.subTest(seq_id=row[0]):
                self.assertGreaterEqual(float(row[4]), 0.0)
                self.assertGreaterEqual(int(row[5]), 0)
        manifest = json.loads((out / RUN_MANIFEST).read_text(encoding='utf-8'))
        self.assertIn('geo.csv', manifest['checksums'])


class EncodeDecodeCommandTestCase(CommandTestMixin, SimpleTestCase):
    """Test cases for encode and decode"""

    def setUp(self):
        """Set up test fixtures"""
        super().setUp()
        self.sequences = [constant_velocity_sequence('cube', 10, [0.002, 0.0, 0.0]),
                          constant_velocity_sequence('cube', 7, [0.0, 0.001, 0.0])]
        write_dataset(self.dir / 'data', self.sequences)
        save_object_model(build_object_model('cube', sample_count=80, point_count=16),
                          self.dir / 'objects' / 'cube.obj')
        config = TokenizerConfig(codebook_size=8, latent_dim=8, hidden=16, window=4, handedness_dim=4)
        save_tokenizer(self.dir / 'tok', build_artifacts(config, seed=0))

    def test_encode_then_decode(self):
        """Test streams, vocabulary, decoded sequences and the round-trip report"""
        encoded = self.dir / 'enc'
        self.call('encode', checkpoint=str(self.dir / 'tok'), data=str(self.dir / 'data'), out=str(encoded))
        lines = (encoded / 'tokens.txt').read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(lines), 2)
        self.assertEqual(len(lines[0].split()), 2 + 3 * 3)
        self.assertTrue(lines[1].startswith('<HOI> HAND_'))
        self.assertTrue((encoded / 'vocab.txt').is_file())

        decoded = self.dir / 'dec'
        self.call('decode', checkpoint=str(self.dir / 'tok'), tokens=str(encoded),
                  objects=str(self.dir / 'objects'), out=str(decoded))
        for i, source in enumerate(self.sequences):
            with self.subTest(sequence=i):
                sequence = read_hoiseq(decoded / 'decoded' / f"{i:05d}.hoiseq")
                self.assertEqual(sequence.num_frames, source.num_frames)
                self.assertEqual(sequence.caption, source.caption)
        with open(decoded / 'roundtrip.csv', newline='', encoding='utf-8') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['index', 'source', 'l1'])
        self.assertEqual(rows[-1][0], 'mean')
        self.assertEqual(len(rows), 4)

    def test_inspect_with_zero_usage_counts(self):
        """Test inspect reports finite perplexity when no code has been used"""
        artifacts = build_artifacts(TokenizerConfig(codebook_size=8, latent_dim=8, hidden=16, window=4,
                                                    handedness_dim=4), seed=0)
        artifacts.hand_codebook.ema_counts = np.zeros(artifacts.hand_codebook.size, dtype=np.float32)
        save_tokenizer(self.dir / 'unused', artifacts)
        self.call('inspect', checkpoint=str(self.dir / 'unused'), out=str(self.dir / 'ins'))
        with open(self.dir / 'ins' / 'usage.csv', newline='', encoding='utf-8') as fh:
            rows = {(row[0], row[1]): row[2] for row in csv.reader(fh)}
        self.assertEqual(float(rows[('hand', 'perplexity')]), 1.0)
        self.assertEqual(rows[('hand', '0')], '0')
        self.assertTrue(np.isfinite(float(rows[('object', 'perplexity')])))

    def test_missing_checkpoint(self):
        """Test absent and unset checkpoints"""
        with self.assertRaisesMessage(CommandError, 'error=ConfigError key=checkpoint'):
            self.call('encode', data=str(self.dir / 'data'), out=str(self.dir / 'e1'))
        with self.assertRaisesMessage(CommandError, 'error=MissingArtifact'):
            self.call('encode', checkpoint=str(self.dir / 'absent'), data=str(self.dir / 'data'),
                      out=str(self.dir / 'e2'))


@mock.patch('hoi.management.commands.run_task.stream_to_text', return_value='<HOI>')
@mock.patch('hoi.management.commands.run_task.load_templates')
@mock.patch('hoi.management.commands.run_task.load_object_models')
@mock.patch('hoi.management.commands.run_task.load_tokenizer')
@mock.patch('hoi.management.commands.run_task.load_lm')
class RunTaskCommandTestCase(CommandTestMixin, SimpleTestCase):
    """Test cases for run_task output files"""

    def run_with(self, generation, *mocks):
        output = TaskOutput(TaskKind.TEXT_TO_HOI, sequence=constant_velocity_sequence('cube', 8, [0.001, 0.0, 0.0]),
                            generation=generation)
        out = self.dir / 'task'
        with mock.patch('hoi.management.commands.run_task.run_task', return_value=output):
            self.call('run_task', task='text_to_hoi', caption='lift the cube', checkpoint=str(self.dir / 'lm'),
                      tokenizer=str(self.dir / 'tok'), objects=str(self.dir / 'objects'), out=str(out))
        return out, json.loads((out / 'result.json').read_text(encoding='utf-8'))

    def test_well_formed_generation_writes_motion(self, *mocks):
        """Test a well-formed generation is written as output.hoiseq"""
        out, summary = self.run_with(Generation(ids=[1, 2]), *mocks)
        self.assertTrue((out / 'output.hoiseq').is_file())
        self.assertFalse(summary['malformed'])
        self.assertTrue(summary['motion_written'])

    def test_malformed_generation_writes_no_motion(self, *mocks):
        """Test a malformed generation leaves no motion file but records the reason"""
        with self.assertLogs('hoi.management.commands.run_task', level='WARNING'):
            out, summary = self.run_with(Generation(ids=[1, 2], malformed=True, reason='missing <EOS>'), *mocks)
        self.assertFalse((out / 'output.hoiseq').exists())
        self.assertTrue((out / 'generation.txt').is_file())
        self.assertTrue(summary['malformed'])
        self.assertFalse(summary['motion_written'])
        self.assertEqual(summary['reason'], 'missing <EOS>')
