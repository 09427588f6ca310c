"""
learning informed reconstruction: a small residual network trained on
dictionary fingerprints stands in for the Bloch map inside a projected
Gauss-Newton solver
"""

import collections
import logging

import numpy as np
import scipy.sparse.linalg
import torch

import pyqmrirecon.bloch as bloch
import pyqmrirecon.core as core
import pyqmrirecon.forward as forward
import pyqmrirecon.integrated as integrated
import pyqmrirecon.rawarray as rawarray
import pyqmrirecon.varreg as varreg


LOGGER = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)
CG_RTOL = 1e-12
CG_MAXITER = 1000


class TrainingDiverged(core.NumericalFailure):
    """
    raise when the training loss becomes NaN or infinite
    """


class InnerSolveBreakdown(core.NumericalFailure):
    """
    raise when the conjugate gradient inner solve breaks down
    """


class InvalidTrainConfig(core.ConfigError):
    """
    raise if training settings are out of range
    """


TrainingSet = collections.namedtuple('TrainingSet',
                                     ['relaxation', 'fingerprints'])

TrainResult = collections.namedtuple('TrainResult', ['net', 'losses', 'mse'])

NNResult = collections.namedtuple('NNResult', ['qmap', 'trace'])


class SurrogateNet(torch.nn.Module):
    """
    fully connected tanh network (T1, T2) -> fingerprint

    Note:
        inputs are mapped affinely from the (T1, T2) box to [-1, 1]^2 and
        the 2L outputs are the real then imaginary parts of the L readouts.
        Hidden layers with equal in and out widths carry a residual skip

    Args:
        frames(int): fingerprint length L
        lower(array like): lower (T1, T2) bounds
        upper(array like): upper (T1, T2) bounds
        hidden(tuple): hidden layer widths, empty for a single linear map
        residual(bool): use skip connections where widths match
    """

    def __init__(self, frames, lower, upper, hidden=DEFAULT_HIDDEN,
                 residual=True):
        super().__init__()
        self.frames = int(frames)
        self.hidden = tuple(int(width) for width in hidden)
        self.residual = bool(residual)
        self.register_buffer('lower', torch.tensor(lower, dtype=torch.float64))
        self.register_buffer('upper', torch.tensor(upper, dtype=torch.float64))
        widths = (2,) + self.hidden + (2 * self.frames,)
        self.layers = torch.nn.ModuleList(
            torch.nn.Linear(widths[number], widths[number + 1],
                            dtype=torch.float64)
            for number in range(len(widths) - 1))

    def normalise(self, relaxation):
        """
        map (T1, T2) from the box to [-1, 1]^2
        """
        return 2 * (relaxation - self.lower) / (self.upper - self.lower) - 1

    def forward(self, normalised):
        """
        network output for normalised inputs of shape (n, 2)
        """
        activation = normalised
        for layer in self.layers[:-1]:
            update = torch.tanh(layer(activation))
            if self.residual and update.shape == activation.shape:
                activation = activation + update
            else:
                activation = update
        return self.layers[-1](activation)

    def architecture(self):
        """
        JSON friendly description used to rebuild the network
        """
        return {'frames': self.frames, 'hidden': list(self.hidden),
                'residual': self.residual,
                'lower': self.lower.tolist(), 'upper': self.upper.tolist()}

    def signal(self, t1, t2):
        """
        complex (n, L) fingerprints
        """
        return net_forward(self, t1, t2)

    def signal_jacobian(self, t1, t2):
        """
        fingerprints and (n, L, 2) complex derivatives
        """
        return net_forward(self, t1, t2), net_jacobian(self, t1, t2)


class BlochAdapter():
    """
    the exact Bloch map behind the same interface as SurrogateNet

    Args:
        seq(bloch.SequenceSpec): the sequence
    """

    def __init__(self, seq):
        self.seq = seq
        self.frames = seq.frames

    def signal(self, t1, t2):
        """
        complex (n, L) fingerprints
        """
        return bloch.simulate_many(t1, t2, self.seq)

    def signal_jacobian(self, t1, t2):
        """
        fingerprints and (n, L, 2) complex derivatives
        """
        return bloch.signals_and_jacobians(t1, t2, self.seq)


def _inputs(net, t1, t2):
    relaxation = np.stack([np.atleast_1d(np.asarray(t1, dtype=float)).ravel(),
                           np.atleast_1d(np.asarray(t2, dtype=float)).ravel()],
                          axis=1)
    lower = net.lower.numpy()
    upper = net.upper.numpy()
    clipped = np.clip(relaxation, lower, upper)
    if not np.array_equal(clipped, relaxation):
        LOGGER.warning('%d inputs outside the training box were clamped',
                       int(np.any(clipped != relaxation, axis=1).sum()))
    return net.normalise(torch.from_numpy(clipped))


def _to_complex(outputs, frames):
    return outputs[..., :frames] + 1j * outputs[..., frames:]


def net_forward(net, t1, t2):
    """
    evaluate the network at physical (T1, T2) values

    Args:
        net(SurrogateNet): the network
        t1(array like): T1 values in seconds
        t2(array like): T2 values in seconds

    Returns:
        signals(numpy.ndarray): complex (n, L)
    """
    with torch.no_grad():
        outputs = net(_inputs(net, t1, t2)).numpy()
    return _to_complex(outputs, net.frames)


def net_jacobian(net, t1, t2):
    """
    exact derivatives of the network output with respect to physical
    (T1, T2) by forward mode differentiation

    Args:
        net(SurrogateNet): the network
        t1(array like): T1 values in seconds
        t2(array like): T2 values in seconds

    Returns:
        jacobian(numpy.ndarray): complex (n, L, 2)
    """
    inputs = _inputs(net, t1, t2)

    def single(point):
        return net(point[None])[0]

    jac = torch.func.vmap(torch.func.jacfwd(single))(inputs).detach()
    scale = (2 / (net.upper - net.lower)).numpy()
    jac = jac.numpy() * scale[None, None, :]
    return jac[:, :net.frames] + 1j * jac[:, net.frames:]


class TrainConfig():
    """
    training settings

    Args:
        epochs(int): passes over the training set
        batch_size(int): samples per Adam step
        learning_rate(float): initial Adam step
        gamma(float): learning rate factor per epoch
        penalty(float): weight r of the squared parameter norm
        seed(int): seed of the initial weights and the shuffling

    Raises:
        InvalidTrainConfig: if a value is out of range
    """

    def __init__(self, epochs=2000, batch_size=256, learning_rate=1e-3,
                 gamma=0.999, penalty=0.0, seed=0):
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.learning_rate = float(learning_rate)
        self.gamma = float(gamma)
        self.penalty = float(penalty)
        self.seed = int(seed)
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidTrainConfig('epochs and batch size must be >= 1')
        if not self.learning_rate > 0 or not 0 < self.gamma <= 1:
            raise InvalidTrainConfig('need learning rate > 0, 0 < gamma <= 1')
        if self.penalty < 0:
            raise InvalidTrainConfig('penalty must be >= 0')

    def to_dict(self):
        """
        JSON friendly representation
        """
        return {'epochs': self.epochs, 'batch_size': self.batch_size,
                'learning_rate': self.learning_rate, 'gamma': self.gamma,
                'penalty': self.penalty, 'seed': self.seed}


def make_training_set(dictionary):
    """
    one ((T1, T2), fingerprint) pair per dictionary entry, in dictionary
    order

    Args:
        dictionary(bloch.FingerprintDictionary): the dictionary

    Returns:
        pairs(TrainingSet): relaxation (n, 2) and fingerprints (n, L)
    """
    relaxation = np.stack([dictionary.t1, dictionary.t2], axis=1)
    return TrainingSet(relaxation, np.array(dictionary.entries))


def _targets(fingerprints):
    fingerprints = np.asarray(fingerprints, dtype=complex)
    return torch.from_numpy(np.concatenate(
        [fingerprints.real, fingerprints.imag], axis=1))


def _penalty(net):
    return sum(torch.sum(param ** 2) for param in net.parameters())


def training_mse(net, pairs):
    """
    mean squared error over all real output entries
    """
    with torch.no_grad():
        outputs = net(net.normalise(torch.from_numpy(pairs.relaxation)))
        return float(torch.nn.functional.mse_loss(
            outputs, _targets(pairs.fingerprints)))


def train_surrogate(pairs, cfg=None, hidden=DEFAULT_HIDDEN, residual=True,
                    lower=None, upper=None):
    """
    fit a SurrogateNet to fingerprint pairs with Adam

    Args:
        pairs(TrainingSet): training data
        cfg(TrainConfig): settings, defaults if None
        hidden(tuple): hidden layer widths
        residual(bool): residual skips
        lower(array like): lower (T1, T2) of the input box, data min if None
        upper(array like): upper (T1, T2) of the input box, data max if None

    Raises:
        core.ConfigError: if there are no pairs
        TrainingDiverged: if the loss becomes NaN

    Returns:
        result(TrainResult): the net, the mean loss of every epoch and the
                             final training MSE
    """
    cfg = cfg or TrainConfig()
    count = pairs.relaxation.shape[0]
    if count == 0:
        raise core.ConfigError('no training pairs')
    if lower is None:
        lower = pairs.relaxation.min(axis=0)
    if upper is None:
        upper = pairs.relaxation.max(axis=0)
    upper = np.where(np.asarray(upper) > np.asarray(lower), upper,
                     np.asarray(lower) + 1.0)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = SurrogateNet(pairs.fingerprints.shape[1], lower, upper, hidden,
                           residual)
    inputs = net.normalise(torch.from_numpy(pairs.relaxation))
    targets = _targets(pairs.fingerprints)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer,
                                                       gamma=cfg.gamma)
    generator = torch.Generator().manual_seed(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(count, generator=generator)
        total = 0.0
        for start in range(0, count, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = torch.nn.functional.mse_loss(net(inputs[batch]),
                                                targets[batch])
            if cfg.penalty:
                loss = loss + cfg.penalty * _penalty(net)
            if not torch.isfinite(loss):
                raise TrainingDiverged('loss is {} in epoch {}'.format(
                    float(loss), epoch))
            loss.backward()
            optimizer.step()
            total += float(loss) * batch.numel()
        scheduler.step()
        losses.append(total / count)
        if (epoch + 1) % 100 == 0:
            LOGGER.debug('epoch %d loss %.6e', epoch + 1, losses[-1])
    mse = training_mse(net, pairs)
    LOGGER.info('surrogate trained for %d epochs, mse %.6e', cfg.epochs, mse)
    return TrainResult(net, losses, mse)


def save_net(rawpath, net, meta=None):
    """
    write the parameters as one raw array, architecture in the header

    Args:
        rawpath(str): where to write
        net(SurrogateNet): the network
        meta(dict): extra header fields, e.g. the sequence digest
    """
    state = net.state_dict()
    names = [name for name in state if name not in ('lower', 'upper')]
    flat = np.concatenate([state[name].detach().numpy().ravel()
                           for name in names]) if names else np.zeros(0)
    header = dict(meta or {})
    header.update({'kind': 'surrogate', 'architecture': net.architecture(),
                   'parameters': [{'name': name,
                                   'shape': list(state[name].shape)}
                                  for name in names]})
    rawarray.write_raw(rawpath, flat, header)


def load_net(rawpath):
    """
    read a network written by save_net

    Args:
        rawpath(str): the raw file

    Raises:
        rawarray.RawFormatError: if the file is not a surrogate

    Returns:
        net(SurrogateNet): the network
        meta(dict): the header
    """
    flat, meta = rawarray.read_raw(rawpath)
    if meta.get('kind') != 'surrogate':
        raise rawarray.RawFormatError('{} is not a surrogate'.format(rawpath))
    net = SurrogateNet(**meta['architecture'])
    state = {'lower': net.lower, 'upper': net.upper}
    offset = 0
    for param in meta['parameters']:
        size = int(np.prod(param['shape'], dtype=np.int64))
        state[param['name']] = torch.from_numpy(
            flat[offset:offset + size].reshape(param['shape']).copy())
        offset += size
    if offset != flat.size:
        raise rawarray.RawFormatError('{} has {} values, expected {}'.format(
            rawpath, flat.size, offset))
    net.load_state_dict(state)
    return net, meta


def laplacian(stacked, shape):
    """
    five point -Laplacian grad^T grad with Neumann boundary per channel

    Args:
        stacked(numpy.ndarray): (c, n) channels over the flat grid
        shape(tuple): grid shape (ny, nx)

    Returns:
        result(numpy.ndarray): (c, n)
    """
    channels = stacked.reshape((stacked.shape[0],) + tuple(shape))
    return np.stack([-varreg.div(varreg.grad(channel))
                     for channel in channels]).reshape(stacked.shape)


def _neighbour_counts(shape):
    ny, nx = shape
    counts = np.full(shape, 4.0)
    counts[0, :] -= 1
    counts[-1, :] -= 1
    counts[:, 0] -= 1
    counts[:, -1] -= 1
    return counts.ravel()


def _model_jacobian(model, stacked):
    signal, jac = model.signal_jacobian(stacked[1], stacked[2])
    rho = stacked[0]
    full = np.empty(jac.shape[:2] + (3,), dtype=complex)
    full[..., 0] = signal
    full[..., 1:] = rho[:, None, None] * jac
    return rho[:, None] * signal, full


def nn_reconstruct(kspace, model, q0, box, alpha=0.0, max_iters=20,
                   lambda0=None, decay=0.7, tol=1e-8):
    """
    projected Gauss-Newton on 1/2 ||A(rho N(T1, T2)) - y||^2
    + alpha/2 ||grad q||^2

    Note:
        the linear system (J^H A^H A J + alpha L + lam_n I) h = J^H A^H r
        - alpha L q couples voxels through the Laplacian L, it is solved by
        Jacobi preconditioned conjugate gradients. The penalty acts on all
        three channels. Zero data give rho = 0 with T1, T2 at the box
        midpoint

    Args:
        kspace(core.KSpaceData): the measurements
        model(object): SurrogateNet or BlochAdapter
        q0(core.ParamMap): the start, projected into the box
        box(core.AdmissibleBox): the admissible set
        alpha(float): smoothness weight
        max_iters(int): outer iteration budget
        lambda0(float): first damping, a tenth of the median J^H J
                        diagonal if None
        decay(float): damping factor per iteration
        tol(float): stop when the step norm is below tol

    Raises:
        InnerSolveBreakdown: if conjugate gradients break down
        integrated.SolverDiverged: if the residual becomes NaN

    Returns:
        result(NNResult): qmap and trace of (iteration, residual, damping,
                          step_norm, cg_info) dicts
    """
    grid = kspace.grid
    if q0.grid != grid:
        raise core.GridMismatch('{} vs {}'.format(q0.grid, grid))
    if kspace.frames != model.frames:
        raise core.GridMismatch('{} data frames for a model of {} frames'
                                .format(kspace.frames, model.frames))
    if kspace.norm() == 0:
        stacked = np.empty((3,) + grid.shape)
        stacked[0] = 0.0
        stacked[1] = box.midpoint[1]
        stacked[2] = box.midpoint[2]
        return NNResult(core.ParamMap.from_stack(grid, box.clip(stacked)), [])
    operator = forward.MaskedFourier(kspace.masks)
    data = kspace.to_full()
    frames = kspace.frames
    fractions = kspace.masks.reshape(frames, -1).mean(axis=1)
    counts = _neighbour_counts(grid.shape)
    stacked = box.clip(q0.stack()).reshape(3, -1)
    damping = lambda0
    trace = []
    for iteration in range(max_iters):
        series, jac = _model_jacobian(model, stacked)
        misfit = data - operator.forward(series.T.reshape(
            (frames,) + grid.shape))
        residual = float(np.linalg.norm(misfit))
        if not np.isfinite(residual):
            raise integrated.SolverDiverged('residual is {}'.format(residual))
        diagonal = np.einsum('nla,nla,l->na', jac.conj(), jac,
                             fractions).real
        if damping is None:
            gram = np.diagonal(integrated.normal_matrices(jac), axis1=1,
                               axis2=2)
            positive = gram[gram > 0]
            damping = integrated.LAMBDA0_FRACTION * float(np.median(positive)) \
                if positive.size else 1.0

        def matvec(vector, jac=jac, damping=damping):
            step = vector.reshape(3, -1)
            images = np.einsum('nla,an->ln', jac, step).reshape(
                (frames,) + grid.shape)
            back = operator.normal(images).reshape(frames, -1)
            result = np.einsum('nla,ln->an', jac.conj(), back).real
            result += alpha * laplacian(step, grid.shape) + damping * step
            return result.ravel()

        size = 3 * grid.size
        system = scipy.sparse.linalg.LinearOperator((size, size),
                                                    matvec=matvec,
                                                    dtype=float)
        precond = 1.0 / (diagonal.T + alpha * counts[None, :] + damping)
        preconditioner = scipy.sparse.linalg.LinearOperator(
            (size, size), matvec=lambda vector, p=precond.ravel(): p * vector,
            dtype=float)
        back = operator.adjoint(misfit).reshape(frames, -1)
        rhs = np.einsum('nla,ln->an', jac.conj(), back).real - \
            alpha * laplacian(stacked, grid.shape)
        step, info = scipy.sparse.linalg.cg(system, rhs.ravel(),
                                            rtol=CG_RTOL, atol=0.0,
                                            maxiter=CG_MAXITER,
                                            M=preconditioner)
        if info < 0 or not np.isfinite(step).all():
            raise InnerSolveBreakdown('conjugate gradients failed, info {}'
                                      .format(info))
        if info > 0:
            LOGGER.warning('conjugate gradients stopped after %d iterations '
                           'without reaching the tolerance', info)
        updated = box.clip(stacked + step.reshape(3, -1))
        step_norm = float(np.linalg.norm(updated - stacked))
        trace.append({'iteration': iteration, 'residual': residual,
                      'damping': damping, 'step_norm': step_norm,
                      'cg_info': int(info)})
        LOGGER.debug('nn iteration %d residual %.6e step %.3e', iteration,
                     residual, step_norm)
        stacked = updated
        damping *= decay
        if step_norm < tol:
            break
    return NNResult(core.ParamMap.from_stack(
        grid, stacked.reshape((3,) + grid.shape)), trace)
