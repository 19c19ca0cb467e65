from core.ablation import STUDIES, STUDY_NOISE, run_study
from core.decorators import exit_codes
from core.management.base import PipelineCommand
from evaluation.metrics import write_table


class Command(PipelineCommand):
    help = 'Run an ablation sweep (radius, mode, igo, pgo or canvas) and write JSON and CSV tables.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--study', required=True, choices=STUDIES)
        parser.add_argument('--seeds', type=int, default=30, help='Scenes per setting')

    @exit_codes
    def handle(self, *args, **options):
        study = options['study']
        for key, value in STUDY_NOISE[study].items():
            if options.get(key) is None:
                options[key] = value
        config = self.run_config(options)
        rows, summary = run_study(study, config, options['seeds'])

        out = self.out_dir(options)
        self.write_json(
            {'study': study, 'seeds': options['seeds'], 'config': self.config_dict(config),
             'rows': rows, 'summary': summary},
            out / f'ablation_{study}.json',
        )
        write_table(rows, out / f'ablation_{study}.csv')
        for row in rows:
            self.stdout.write('  '.join(f'{key}={value}' for key, value in row.items()))
        self.stdout.write(self.style.SUCCESS(f'Wrote ablation_{study}.json and .csv to {out}'))
