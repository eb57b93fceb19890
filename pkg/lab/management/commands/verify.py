from lab.commands import LabCommand
from pipelines.verification import SUITES, run_suite


class Command(LabCommand):
    help = '运行内置验证套件，任一检查失败时以非零状态退出'

    def add_lab_arguments(self, parser):
        parser.add_argument('--suite', choices=sorted(SUITES) + ['all'], default='all')

    def run(self, options, pool):
        return run_suite(options['suite'], seed=options['seed'], pool=pool), None
