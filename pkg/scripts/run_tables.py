"""Reproduce the error tables in sequence and print each matrix with its gate verdict."""

import argparse
import logging
import sys

from sav_deeponet.harness import TABLES, canonical_config, format_matrix, reproduce


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("tables", nargs="*", type=int, default=sorted(TABLES), choices=sorted(TABLES))
    ap.add_argument("--out", default=None, help="output root (default: $SAV_DEEPONET_OUT or ./runs)")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    ok = True
    for table in args.tables:
        res = reproduce(table, args.out)
        print(f"table {table} ({TABLES[table]}): {'PASS' if res.passed else 'FAIL'}, {res.wall_time:.0f} s")
        print(format_matrix(res, canonical_config(TABLES[table])), flush=True)
        ok &= res.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
