"""Glioma Survival Package"""
