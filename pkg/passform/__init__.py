# -*- coding: utf-8 -*-

__author__ = """Passform Developers"""
__version__ = '0.1.0'
