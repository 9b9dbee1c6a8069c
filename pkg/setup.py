import os.path
from setuptools import setup

here = os.path.abspath(os.path.dirname(__file__))

def read_version():
    """Reads the version from 'soap3d/common.py' without importing numpy."""
    scope = {}
    with open(os.path.join(here, 'soap3d', 'common.py')) as fd:
        for line in fd:
            if line.startswith(('MAJOR_VERSION', 'MINOR_VERSION',
                                'PATCH_VERSION', 'PRERELEASE_VERSION')):
                exec(line, scope)
    return "{MAJOR_VERSION}.{MINOR_VERSION}.{PATCH_VERSION}" \
           "{PRERELEASE_VERSION}".format(**scope)

setup(name = "soap3d",
      version = read_version(),
      description = "Second-order average pooling descriptors for LiDAR "
                    "place recognition in orchards.",
      author = "The soap3d developers",
      license = "MIT",
      classifiers = [
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'Programming Language :: Python :: 3',
          'Programming Language :: Python :: 3.7',
          'Programming Language :: Python :: 3.8',
          'Programming Language :: Python :: 3.9',
          'Programming Language :: Python :: 3.10',
          'Topic :: Scientific/Engineering :: Image Recognition',
      ],

      packages = [
          'soap3d',
          'soap3d.formats',
      ],
      python_requires = ">=3.7",
      install_requires = [
          'numpy>=1.17',
          'scipy>=1.4',
      ],
      extras_require = {
          'plot' : ['matplotlib'],
      },
      test_suite = 'tests',

      entry_points = {
          'console_scripts' : [
              'soap3d = soap3d.__main__:libmain',
          ],
      },
)
