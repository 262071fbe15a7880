"""
Train the HOI-decomposed tokenizer and report round-trip reconstruction
error and interpenetration on the training and held-out splits, plus one
geometry row per reconstructed sequence.
"""

import csv
import logging

import numpy as np

from ...services.evaluation_service import iv_summary
from ...services.geometry_service import ContactThresholds, geo_loss, write_geo_report
from ...services.tokenizer_service import (
    geo_weights, reconstruct, reconstruction_error, save_tokenizer, train_tokenizer,
)
from ...utils.file_formats import read_dataset
from ._base import PipelineCommand, data_paths, load_object_models

logger = logging.getLogger(__name__)

TOKENIZER_DIR = 'tokenizer'
METRICS_FILE = 'reconstruction.csv'
GEO_FILE = 'geo.csv'


class Command(PipelineCommand):
    help = 'Train the motion tokenizer on a generated dataset'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='gen_data output directory')
        parser.add_argument('--no-geo', action='store_true', help='Disable the geometric losses')

    def run(self, config, out, options):
        paths = data_paths(options['data'])
        if options.get('no_geo'):
            config.tokenizer.geo_losses = False
        train = read_dataset(paths['train'])
        heldout = read_dataset(paths['heldout']) if paths['heldout'].exists() else []
        models = load_object_models(paths['objects'])

        result = train_tokenizer(train, config.tokenizer, models, config.geometry, seed=config.seed,
                                 workers=config.workers, loss_csv=out / 'loss.csv',
                                 checkpoint_dir=out / 'checkpoints')
        artifacts = result.artifacts
        save_tokenizer(out / TOKENIZER_DIR, artifacts)

        weights = geo_weights(config.geometry)
        thresholds = ContactThresholds(config.geometry.phi_approach, config.geometry.tau_contact)
        rows, geo_rows = [], []
        for split, sequences in (('train', train), ('heldout', heldout)):
            if not sequences:
                continue
            recon = [reconstruct(s, models[s.object_id], artifacts) for s in sequences]
            for i, (source, rebuilt) in enumerate(zip(sequences, recon)):
                report = geo_loss(source.features, rebuilt.features, models[source.object_id], weights, thresholds)
                geo_rows.append((f"{split}/{i:05d}", report))
            l1 = float(np.mean([reconstruction_error(r, s) for r, s in zip(recon, sequences)]))
            iv = iv_summary(recon, models)
            rows.append([split, repr(l1), repr(iv['iv_count']), repr(iv['iv_per_frame']), repr(iv['iv_max_depth'])])
            logger.info(f"{split}: l1={l1:.5f} iv_count={iv['iv_count']:.0f}")

        with open(out / METRICS_FILE, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['split', 'l1', 'iv_count', 'iv_per_frame', 'iv_max_depth'])
            writer.writerows(rows)
        write_geo_report(out / GEO_FILE, geo_rows)
        self.stdout.write(self.style.SUCCESS(f"Tokenizer saved to {out / TOKENIZER_DIR}"))
        return {'data': str(options['data'])}
