"""Element symbols and standard atomic masses (amu)."""

SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()

ATOMIC_NUMBERS = {sym: z for z, sym in enumerate(SYMBOLS, start=1)}

# first 36 elements; heavier atoms fall back to 2*Z, which is only used for MD
_MASSES = (
    1.008, 4.0026, 6.94, 9.0122, 10.81, 12.011, 14.007, 15.999, 18.998, 20.180,
    22.990, 24.305, 26.982, 28.085, 30.974, 32.06, 35.45, 39.948, 39.098, 40.078,
    44.956, 47.867, 50.942, 51.996, 54.938, 55.845, 58.933, 58.693, 63.546, 65.38,
    69.723, 72.630, 74.922, 78.971, 79.904, 83.798,
)


def symbol_to_number(symbol: str) -> int:
    key = symbol.strip()
    key = key[:1].upper() + key[1:].lower()
    try:
        return ATOMIC_NUMBERS[key]
    except KeyError:
        if key.isdigit() and 1 <= int(key) <= len(SYMBOLS):
            return int(key)
        raise ValueError(f"unknown element symbol {symbol!r}") from None


def number_to_symbol(z: int) -> str:
    if not 1 <= z <= len(SYMBOLS):
        raise ValueError(f"atomic number out of range: {z}")
    return SYMBOLS[z - 1]


def atomic_mass(z: int) -> float:
    if 1 <= z <= len(_MASSES):
        return _MASSES[z - 1]
    return 2.0 * z
