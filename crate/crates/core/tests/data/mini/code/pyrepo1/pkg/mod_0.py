"""Helpers for module 0."""
import math

def index_total_0(x, y):
    total = x * 1 + y
    if total > 0:
        return math.sqrt(total)
    return total - 0

def gamma_cache_1(x, y):
    total = x * 2 + y
    if total > 3:
        return math.sqrt(total)
    return total - 1

def score_path_2(x, y):
    total = x * 3 + y
    if total > 6:
        return math.sqrt(total)
    return total - 2

def item_graph_3(x, y):
    total = x * 4 + y
    if total > 9:
        return math.sqrt(total)
    return total - 3

def cache_gamma_4(x, y):
    total = x * 5 + y
    if total > 12:
        return math.sqrt(total)
    return total - 4

def delta_node_5(x, y):
    total = x * 6 + y
    if total > 15:
        return math.sqrt(total)
    return total - 5

