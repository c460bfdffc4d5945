#!/bin/python
# flake8: noqa: E501
'''Script to generate documentation for this project.'''
import argparse
import os
import shutil
from pathlib import Path

import pdoc
from packaging import version

HERE = Path(__file__).parent
OUTPUT_DIR = HERE / 'docs'
PACKAGE = HERE / '..' / 'grid_lode'


def makedir(path: Path, destroy=False):
    if destroy and os.path.isdir(path):
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def get_directory_version(path: Path):
    with open(path / '_version.py', 'r') as f:
        contents = f.read()

    line = [i for i in contents.split('\n') if '__version__=' in i.replace(' ', '')][0]
    return line.replace(' ', '').replace('__version__=', '').replace("'", "")


def configure_pdoc(**kwargs):
    os.environ["PDOC_DEFINE_VIEW_SOURCE_MACRO"] = "1"
    pdoc.render.configure(**{**PDOC_CONFIG, **kwargs})


def extras_pages():
    '''Module names of the hand-written pages under `source/extras`'''
    directory = HERE / 'source' / 'extras'
    return sorted(
        f'source.extras.{file[:-3]}' for file in os.listdir(directory)
        if file.endswith('.py') and not file.startswith('__')
    )


def documented_versions():
    found = [version.Version(i) for i in os.listdir(OUTPUT_DIR / 'docs') if os.path.isdir(OUTPUT_DIR / 'docs' / i)]
    return [str(v) for v in sorted(found, reverse=True)]


__version__ = get_directory_version(PACKAGE)
PDOC_CONFIG = dict(docformat='google', footer_text=f'grid_lode v{__version__}')


if __name__ == '__main__':
    parser = argparse.ArgumentParser()
    parser.add_argument('-p', '--path', help='Generate documentation for this path', default=str(PACKAGE))
    parser.add_argument('--clean', help='Remove any existing documentation of any version', action='store_true')
    args = parser.parse_args()

    # top level pages: the README plus the extras
    makedir(OUTPUT_DIR, destroy=args.clean)
    configure_pdoc(search=False, show_source=False)
    pdoc.pdoc(HERE / 'source', output_directory=OUTPUT_DIR)
    makedir(OUTPUT_DIR / 'extras')
    for name in extras_pages():
        module = pdoc.doc.Module.from_name(name)
        with open(OUTPUT_DIR / 'extras' / f'{name.rsplit(".", 1)[-1]}.html', 'w') as f:
            f.write(pdoc.render.html_module(module, []))

    # API documentation, one folder per version
    args.path = Path(args.path)
    path_version = get_directory_version(args.path)
    makedir(OUTPUT_DIR / 'docs' / path_version)
    configure_pdoc(search=True, show_source=True, footer_text=f'grid_lode v{path_version}')
    pdoc.pdoc(args.path, output_directory=OUTPUT_DIR / 'docs' / path_version)

    # remove files for un-documented modules, like __main__ and _version
    api_dir = OUTPUT_DIR / 'docs' / path_version / 'grid_lode'
    for file in os.listdir(api_dir):
        if file.startswith('_') and file.endswith('.html'):
            os.remove(api_dir / file)

    print('documented versions:', ', '.join(documented_versions()))
