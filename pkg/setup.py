from setuptools import setup

import pyqmrirecon.version


setup(name='pyqmrirecon',
      version=pyqmrirecon.version.VERSION,
      description='a Python 3 quantitative MRI reconstruction toolkit',
      author='Thomas W Whittam',
      license='MIT',
      packages=['pyqmrirecon'],
      install_requires=['numpy', 'scipy>=1.12', 'torch>=2.0'],
      include_package_data=True,
      zip_safe=False
)
