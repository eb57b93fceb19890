from lab.commands import LabCommand
from pipelines.hitting_stats import (
    regularity_check, small_time_check, tail_probabilities, time_regularity_check, variant_ordering_check,
)
from solvers.nonlinear_expectation import FAMILY_KINDS, family_by_name

CHECKS = ("tails", "regularity", "small-time", "time-regularity", "ordering")


class Command(LabCommand):
    help = '锥命中时间的统计检验（尾概率、正则性、小时间界、夹逼）'
    has_table = True

    def add_lab_arguments(self, parser):
        parser.add_argument('--check', choices=CHECKS, default='tails')
        parser.add_argument('--epsilon', type=float, default=0.4)
        parser.add_argument('--L', type=float, default=0.5, help='P_L 的界')
        parser.add_argument('--L1', type=float, default=None, help='锥斜率，缺省 L + 1')
        parser.add_argument('--T', type=float, default=1.0)
        parser.add_argument('--n-max', type=int, default=20)
        parser.add_argument('--samples', type=int, default=10000)
        parser.add_argument('--step', type=float, default=None, help='Euler 步长')
        parser.add_argument('--pairs', type=int, default=20)
        parser.add_argument('--family', choices=FAMILY_KINDS, default='default',
                            help='正则性检查的控制族：constant 为常数控制，default 为 8 段分段常数')

    def run(self, options, pool):
        L = options['L']
        L1 = L + 1.0 if options['L1'] is None else options['L1']
        common = {"samples": options['samples'], "seed": options['seed'], "step": options['step']}
        family = family_by_name(options['family'], L)
        check = options['check']
        if check == 'tails':
            report = tail_probabilities(options['epsilon'], L1, T=options['T'], n_max=options['n_max'],
                                        pool=pool, **common)
        elif check == 'regularity':
            report = regularity_check(L, L1, T=options['T'], pairs=options['pairs'], family=family, pool=pool,
                                      **common)
        elif check == 'small-time':
            report = small_time_check(options['epsilon'], L, L1, family=family, pool=pool, **common)
        elif check == 'time-regularity':
            report = time_regularity_check(options['epsilon'], L, L1, T=options['T'], family=family, pool=pool,
                                           **common)
        else:
            report = variant_ordering_check(options['epsilon'], L1, T=options['T'], **common)
        table = report.pop("table")
        payload = {"check": check, "family": options['family'], **report, "table": table}
        return payload, table
