#!/usr/bin/env python
"""vessel: arterial network types, the visco-elastic tube law and network files

All quantities are SI (m, s, Pa, kg). Clinical units (mmHg, mL, bpm) only appear in
the network file format and are converted on load/dump.
"""

from .utils import ConfigurationError, DomainError
from .utils import MMHG as _MMHG, ML as _ML
from .utils import read_json as _read_json, write_json as _write_json
from collections import namedtuple, deque
from dataclasses import dataclass, field
import math
import os

import numpy as np

SQRT_PI = math.sqrt(math.pi)

SIGNAL_KINDS = ('pressure', 'ppg_proxy')

NETWORK_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'networks')

Violation = namedtuple('Violation', 'segment message')
Violation.__str__ = lambda self: "{}: {}".format(self.segment or '<network>', self.message)


@dataclass(frozen=True)
class BloodProperties:
    density: float = 1060.0
    viscosity: float = 0.004
    coriolis: float = 1.0
    profile_gamma: float = 9.0

    @property
    def friction_coefficient(self):
        """K_R = 2 pi (gamma + 2) mu / rho for the assumed axial velocity profile"""
        return 2.0 * math.pi * (self.profile_gamma + 2.0) * self.viscosity / self.density

    def violations(self):
        errors = []
        if not self.density > 0:
            errors.append("blood density must be > 0")
        if not self.viscosity >= 0:
            errors.append("blood viscosity must be >= 0")
        if not self.coriolis >= 1:
            errors.append("coriolis coefficient must be >= 1")
        if not self.profile_gamma > 0:
            errors.append("velocity profile shape must be > 0")
        return errors


@dataclass(frozen=True)
class VesselSegment:
    """A visco-elastic tube whose reference radius tapers linearly from the proximal
    to the distal end. Positions along the segment are given relative to its length
    (0 = proximal, 1 = distal)."""
    id: str
    length: float
    radius_proximal: float
    radius_distal: float
    wall_thickness: float
    elastic_modulus: float
    wall_viscosity: float = 0.0
    external_pressure: float = 0.0

    def radius_at(self, position):
        return self.radius_proximal + (self.radius_distal - self.radius_proximal) * position

    def reference_area_at(self, position):
        return math.pi * self.radius_at(position) ** 2 if np.isscalar(position) \
            else np.pi * self.radius_at(np.asarray(position)) ** 2

    def beta_at(self, position):
        """Elastic coefficient beta = 4/3 sqrt(pi) E h0 / A0 at a relative position"""
        return (4.0 / 3.0) * SQRT_PI * self.elastic_modulus * self.wall_thickness / \
            self.reference_area_at(position)

    def gamma_at(self, position):
        """Viscous coefficient Gamma = 2/3 sqrt(pi) phi_w h0 / A0 at a relative position"""
        return (2.0 / 3.0) * SQRT_PI * self.wall_viscosity * self.wall_thickness / \
            self.reference_area_at(position)

    @property
    def reference_area(self):
        return self.reference_area_at(0.0)

    @property
    def elastic_coefficient(self):
        return self.beta_at(0.0)

    @property
    def viscous_coefficient(self):
        return self.gamma_at(0.0)

    @property
    def tapered(self):
        return self.radius_proximal != self.radius_distal

    @property
    def mean_diameter(self):
        return self.radius_proximal + self.radius_distal

    @property
    def volume(self):
        """Reference volume of the truncated cone"""
        rp, rd = self.radius_proximal, self.radius_distal
        return math.pi * self.length * (rp * rp + rp * rd + rd * rd) / 3.0

    def violations(self):
        errors = []
        if not self.length > 0:
            errors.append("length must be > 0")
        if not (self.radius_proximal > 0 and self.radius_distal > 0):
            errors.append("reference area must be > 0")
        if not self.wall_thickness > 0:
            errors.append("wall thickness must be > 0")
        if not self.elastic_modulus > 0:
            errors.append("elastic modulus must be > 0")
        if not self.wall_viscosity >= 0:
            errors.append("wall viscosity must be >= 0")
        return errors


@dataclass(frozen=True)
class WindkesselBed:
    proximal_resistance: float
    distal_resistance: float
    compliance: float
    outflow_pressure: float = 0.0

    @property
    def total_resistance(self):
        return self.proximal_resistance + self.distal_resistance

    def violations(self):
        errors = []
        if not (self.proximal_resistance >= 0 and self.distal_resistance >= 0):
            errors.append("bed resistances must be >= 0")
        if not self.compliance > 0:
            errors.append("bed compliance must be > 0")
        return errors


@dataclass(frozen=True)
class HeartFunction:
    heart_rate: float
    stroke_volume: float
    lvet: float
    pft: float
    rfv: float = 0.0

    @property
    def period(self):
        return 60.0 / self.heart_rate

    @property
    def mean_flow(self):
        return self.stroke_volume * self.heart_rate / 60.0

    def violations(self):
        # a zero stroke volume is accepted: it is the unexcited network
        errors = []
        if not self.heart_rate > 0:
            errors.append("heart rate must be > 0")
            return errors
        if not self.stroke_volume >= 0:
            errors.append("stroke volume must be >= 0")
        if not 0 < self.pft < self.lvet < self.period:
            errors.append("require 0 < PFT < LVET < 60/HR (PFT={}, LVET={}, HR={})".format(
                self.pft, self.lvet, self.heart_rate))
        if not 0 <= self.rfv < 1:
            errors.append("reflected fraction volume must be in [0, 1)")
        return errors


@dataclass(frozen=True)
class MeasurementSite:
    segment: str
    position: float
    kind: str = 'pressure'

    @property
    def label(self):
        return "{}@{:.2f}:{}".format(self.segment, self.position, self.kind)


@dataclass(frozen=True)
class ArterialNetwork:
    segments: tuple
    topology: dict
    root: str
    heart: HeartFunction
    beds: dict
    blood: BloodProperties = field(default_factory=BloodProperties)
    sites: tuple = ()
    name: str = 'network'

    def segment(self, segment_id):
        for seg in self.segments:
            if seg.id == segment_id:
                return seg
        raise KeyError(segment_id)

    @property
    def segment_ids(self):
        return [seg.id for seg in self.segments]

    def children(self, segment_id):
        return tuple(self.topology.get(segment_id, ()))

    def parents(self):
        parents = {}
        for parent, children in self.topology.items():
            for child in children:
                parents[child] = parent
        return parents

    def leaves(self):
        return [seg.id for seg in self.segments if not self.children(seg.id)]

    def junctions(self):
        """(parent, children) pairs in breadth first order from the root"""
        return [(sid, self.children(sid)) for sid in self.traversal() if self.children(sid)]

    def traversal(self):
        order = []
        queue = deque([self.root])
        seen = set()
        while queue:
            sid = queue.popleft()
            if sid in seen:
                continue
            seen.add(sid)
            order.append(sid)
            queue.extend(self.children(sid))
        return order

    def path_to_root(self, segment_id):
        """Segment ids from the root down to segment_id (inclusive)"""
        parents = self.parents()
        path = [segment_id]
        while path[-1] != self.root:
            if path[-1] not in parents or len(path) > len(self.segments):
                raise ConfigurationError("segment {} is not reachable from the root".format(segment_id))
            path.append(parents[path[-1]])
        return path[::-1]

    def deepest_leaf(self):
        """Leaf with the longest root to leaf path length"""
        best, best_length = self.root, -1.0
        for leaf in self.leaves():
            length = sum(self.segment(s).length for s in self.path_to_root(leaf))
            if length > best_length:
                best, best_length = leaf, length
        return best


def tube_law_pressure(A, dA_dt, seg, position=0.0):
    """Voigt type visco-elastic tube law

    P = P_ext + beta (sqrt(A) - sqrt(A0)) + Gamma / sqrt(A) dA/dt

    Arguments
    ----------
    :param A: Cross-sectional area (m^2), scalar or array
    :param dA_dt: Rate of change of the area (m^2/s)
    :param VesselSegment seg: The segment the area belongs to
    :param float position: Relative position along the segment (tapered segments)

    Returns
    --------
    :return: Transmural pressure in Pa
    :rtype: float or numpy.ndarray

    Exceptions
    -----------
    :raises DomainError: A is not strictly positive
    """
    A = _positive_area(A)
    a0 = seg.reference_area_at(position)
    elastic = seg.beta_at(position) * (np.sqrt(A) - math.sqrt(a0))
    viscous = seg.gamma_at(position) / np.sqrt(A) * dA_dt
    result = seg.external_pressure + elastic + viscous
    return float(result) if np.ndim(result) == 0 else result


def wave_speed(A, seg, blood, position=0.0):
    """Pulse wave speed c = sqrt(beta / (2 rho)) A^(1/4)

    :raises DomainError: A is not strictly positive
    """
    A = _positive_area(A)
    result = np.sqrt(seg.beta_at(position) / (2.0 * blood.density)) * A ** 0.25
    return float(result) if np.ndim(result) == 0 else result


def area_at_pressure(pressure, seg, position=0.0):
    """Inverse of the elastic tube law (static area at a given pressure)"""
    root = math.sqrt(seg.reference_area_at(position)) + \
        (pressure - seg.external_pressure) / seg.beta_at(position)
    if root <= 0:
        raise DomainError("pressure {} Pa collapses segment {}".format(pressure, seg.id))
    return root * root


def _positive_area(A):
    A = np.asarray(A, dtype=float)
    if np.any(~(A > 0)):
        raise DomainError("cross-sectional area must be > 0")
    return A


def validate_network(net):
    """Check every type invariant and the topology rules of a network

    Returns
    --------
    :return: One Violation (segment id, message) per broken rule, empty if valid
    :rtype: list
    """
    report = []
    ids = [seg.id for seg in net.segments]
    known = set(ids)

    for sid in set(i for i in ids if ids.count(i) > 1):
        report.append(Violation(sid, "duplicate segment id"))
    for seg in net.segments:
        report.extend(Violation(seg.id, msg) for msg in seg.violations())
    report.extend(Violation(None, msg) for msg in net.blood.violations())
    report.extend(Violation(net.root, "heart: " + msg) for msg in net.heart.violations())

    if net.root not in known:
        report.append(Violation(net.root, "root segment does not exist"))
        return report

    edges_ok = True
    parent_count = {}
    for parent, children in net.topology.items():
        if parent not in known:
            report.append(Violation(parent, "topology references unknown segment"))
            edges_ok = False
        for child in children:
            if child not in known:
                report.append(Violation(child, "topology references unknown segment"))
                edges_ok = False
            parent_count[child] = parent_count.get(child, 0) + 1

    if edges_ok:
        for sid, count in sorted(parent_count.items()):
            if count > 1:
                report.append(Violation(sid, "not a tree: segment has {} parents".format(count)))
        if parent_count.get(net.root):
            report.append(Violation(net.root, "not a tree: root segment has a parent (cycle)"))
        reached = set(net.traversal())
        for sid in ids:
            if sid not in reached:
                report.append(Violation(sid, "not a tree: segment is not connected to the root"))

    leaves = set(sid for sid in ids if not net.children(sid))
    for leaf in sorted(leaves):
        if leaf not in net.beds:
            report.append(Violation(leaf, "missing outlet bed"))
    for sid, bed in sorted(net.beds.items()):
        if sid not in leaves:
            report.append(Violation(sid, "outlet bed attached to a non-leaf segment"))
        report.extend(Violation(sid, msg) for msg in bed.violations())

    for site in net.sites:
        if site.segment not in known:
            report.append(Violation(site.segment, "measurement site references unknown segment"))
        if not 0.0 <= site.position <= 1.0:
            report.append(Violation(site.segment, "measurement site position must be in [0, 1]"))
        if site.kind not in SIGNAL_KINDS:
            report.append(Violation(site.segment, "unknown signal kind {!r}".format(site.kind)))

    return report


def path_length(net, proximal, distal):
    """Distance along the tree between two sites, the first being upstream of the second

    Sites are (segment, position) pairs or MeasurementSite objects.

    :raises ConfigurationError: the sites are not on one root to leaf path
    """
    seg_a, z_a = _site_tuple(proximal)
    seg_b, z_b = _site_tuple(distal)
    if seg_a == seg_b:
        if z_b < z_a:
            raise ConfigurationError("distal site lies upstream of the proximal site")
        return (z_b - z_a) * net.segment(seg_a).length

    path = net.path_to_root(seg_b)
    if seg_a not in path:
        raise ConfigurationError("{} and {} are not on one root to leaf path".format(seg_a, seg_b))
    start = path.index(seg_a)
    distance = (1.0 - z_a) * net.segment(seg_a).length
    for sid in path[start + 1:-1]:
        distance += net.segment(sid).length
    return distance + z_b * net.segment(seg_b).length


def _site_tuple(site):
    if isinstance(site, MeasurementSite):
        return site.segment, site.position
    segment, position = site[0], site[1]
    return segment, float(position)


## Network files ##

_BLOOD_KEYS = {'density_kg_m3': 'density', 'viscosity_pa_s': 'viscosity',
               'coriolis': 'coriolis', 'profile_gamma': 'profile_gamma'}
_SEGMENT_KEYS = {'id': 'id', 'length_m': 'length', 'radius_proximal_m': 'radius_proximal',
                 'radius_distal_m': 'radius_distal', 'wall_thickness_m': 'wall_thickness',
                 'elastic_modulus_pa': 'elastic_modulus', 'wall_viscosity_pa_s': 'wall_viscosity',
                 'external_pressure_pa': 'external_pressure'}
_BED_KEYS = {'r1_pa_s_m3': 'proximal_resistance', 'r2_pa_s_m3': 'distal_resistance',
             'compliance_m3_pa': 'compliance', 'outflow_pressure_mmhg': 'outflow_pressure'}
_HEART_KEYS = {'heart_rate_bpm': 'heart_rate', 'stroke_volume_ml': 'stroke_volume',
               'lvet_s': 'lvet', 'pft_s': 'pft', 'rfv': 'rfv'}
_SITE_KEYS = {'segment': 'segment', 'position': 'position', 'kind': 'kind'}
_TOP_KEYS = ('name', 'blood', 'heart', 'segments', 'root', 'topology', 'beds', 'sites')


def _translate(section, data, keys, required=()):
    if not isinstance(data, dict):
        raise ConfigurationError("{}: expected an object".format(section))
    unknown = sorted(set(data) - set(keys))
    if unknown:
        raise ConfigurationError("{}: unknown keys {}".format(section, ", ".join(unknown)))
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigurationError("{}: missing keys {}".format(section, ", ".join(missing)))
    return dict((keys[k], v) for k, v in data.items())


def network_from_dict(data):
    """Build an ArterialNetwork from the unit-suffixed JSON layout

    The result is not validated, use validate_network for that.

    :raises ConfigurationError: unknown or missing keys
    """
    _translate('network', data, dict((k, k) for k in _TOP_KEYS),
               required=('segments', 'root', 'heart', 'beds'))

    blood = BloodProperties(**_translate('blood', data.get('blood', {}), _BLOOD_KEYS))

    heart = _translate('heart', data['heart'], _HEART_KEYS,
                       required=('heart_rate_bpm', 'stroke_volume_ml', 'lvet_s', 'pft_s'))
    heart['stroke_volume'] = heart['stroke_volume'] * _ML
    heart = HeartFunction(**heart)

    segments = []
    for i, entry in enumerate(data['segments']):
        fields = _translate('segments[{}]'.format(i), entry, _SEGMENT_KEYS,
                            required=('id', 'length_m', 'radius_proximal_m',
                                      'wall_thickness_m', 'elastic_modulus_pa'))
        fields.setdefault('radius_distal', fields['radius_proximal'])
        segments.append(VesselSegment(**fields))

    beds = {}
    for sid, entry in data['beds'].items():
        fields = _translate('beds[{}]'.format(sid), entry, _BED_KEYS,
                            required=('r1_pa_s_m3', 'r2_pa_s_m3', 'compliance_m3_pa'))
        fields['outflow_pressure'] = fields.get('outflow_pressure', 0.0) * _MMHG
        beds[sid] = WindkesselBed(**fields)

    topology = dict((parent, tuple(children)) for parent, children in data.get('topology', {}).items())
    sites = tuple(MeasurementSite(**_translate('sites[{}]'.format(i), entry, _SITE_KEYS,
                                               required=('segment', 'position')))
                  for i, entry in enumerate(data.get('sites', [])))

    return ArterialNetwork(segments=tuple(segments), topology=topology, root=data['root'],
                           heart=heart, beds=beds, blood=blood, sites=sites,
                           name=data.get('name', 'network'))


def network_to_dict(net):
    inverse = lambda keys: dict((v, k) for k, v in keys.items())
    seg_keys, bed_keys = inverse(_SEGMENT_KEYS), inverse(_BED_KEYS)
    blood_keys, heart_keys = inverse(_BLOOD_KEYS), inverse(_HEART_KEYS)

    heart = dict((heart_keys[k], getattr(net.heart, k)) for k in heart_keys)
    heart['stroke_volume_ml'] = net.heart.stroke_volume / _ML
    beds = {}
    for sid, bed in net.beds.items():
        entry = dict((bed_keys[k], getattr(bed, k)) for k in bed_keys)
        entry['outflow_pressure_mmhg'] = bed.outflow_pressure / _MMHG
        beds[sid] = entry

    return {
        'name': net.name,
        'blood': dict((blood_keys[k], getattr(net.blood, k)) for k in blood_keys),
        'heart': heart,
        'segments': [dict((seg_keys[k], getattr(seg, k)) for k in seg_keys) for seg in net.segments],
        'root': net.root,
        'topology': dict((p, list(c)) for p, c in net.topology.items()),
        'beds': beds,
        'sites': [{'segment': s.segment, 'position': s.position, 'kind': s.kind} for s in net.sites],
    }


def bundled_networks():
    return sorted(name[:-5] for name in os.listdir(NETWORK_DIR) if name.endswith('.json'))


def resolve_network_path(name_or_path):
    """Map a bundled network name (eg 'tube1') to its file, paths pass through"""
    if os.path.exists(name_or_path):
        return name_or_path
    candidate = os.path.join(NETWORK_DIR, name_or_path + '.json')
    if os.path.exists(candidate):
        return candidate
    raise ConfigurationError("no network file or bundled network named {!r}".format(name_or_path))


def load_network(name_or_path):
    return network_from_dict(_read_json(resolve_network_path(name_or_path)))


def dump_network(net, path, force=False):
    _write_json(path, network_to_dict(net), force=force)
