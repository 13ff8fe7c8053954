"""Data package"""
