#!/usr/bin/env python
import os
import sys
import pytest

if __name__ == '__main__':
    argv = sys.argv[1:]
    # --slow also runs the full-size benchmark tests
    if '--slow' in argv:
        argv.remove('--slow')
        os.environ['REGIONLET_SLOW'] = '1'
    # verbose, and report why tests were skipped or xfailed
    args = ['-v', '-rxs', '--pyargs', 'regionlets']
    args.extend(argv)
    sys.exit(pytest.main(args))
