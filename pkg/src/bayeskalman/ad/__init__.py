from .tape import (
    Tape,
    Value,
    absolute,
    add,
    div,
    mul,
    neg,
    power,
    sub,
    active_tape,
    backward,
    bmv,
    concat,
    cos,
    data_of,
    diagonal,
    exp,
    getitem,
    gru_cell,
    inv,
    linear,
    log,
    logdet_spd,
    matmul,
    mean,
    parameter,
    relu,
    reshape,
    sigmoid,
    sin,
    softplus,
    solve,
    sqrt,
    square,
    stack,
    tanh,
    transpose,
    vector_map,
    vsum,
)
from .layers import (
    ConcreteDropoutLayer,
    DenseLayer,
    DropoutDense,
    DropoutMode,
    GRUCell,
    Module,
    concrete_dropout_forward,
    gru_step,
)
from .optim import Adam, AdamState, optimizer_step
