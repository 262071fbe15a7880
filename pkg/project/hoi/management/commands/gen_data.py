"""
Generate the synthetic HOI dataset: train/ and heldout/ sequence files plus
the object models they reference.
"""

import logging

from ...services.dataset_service import build_object_models, generate_synthetic_dataset, split_dataset
from ...services.kinematics_service import save_object_model
from ...utils.file_formats import write_dataset
from ._base import HELDOUT_DIR, OBJECTS_DIR, TRAIN_DIR, PipelineCommand

logger = logging.getLogger(__name__)


class Command(PipelineCommand):
    help = 'Generate scripted synthetic hand-object interaction sequences'

    def add_command_arguments(self, parser):
        parser.add_argument('--count', type=int, help='Number of candidate sequences (kinematics.count)')

    def run(self, config, out, options):
        kinematics = config.kinematics
        if options.get('count') is not None:
            kinematics.count = options['count']
            kinematics.validate()

        models = build_object_models(kinematics)
        (out / OBJECTS_DIR).mkdir(parents=True, exist_ok=True)
        for name, model in sorted(models.items()):
            save_object_model(model, out / OBJECTS_DIR / f"{name}.obj")

        sequences = generate_synthetic_dataset(kinematics, config.seed, models, config.workers)
        train, heldout = split_dataset(sequences, kinematics.heldout_fraction)
        write_dataset(out / TRAIN_DIR, train)
        write_dataset(out / HELDOUT_DIR, heldout)
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(train)} training and {len(heldout)} held-out sequences to {out}"
        ))
