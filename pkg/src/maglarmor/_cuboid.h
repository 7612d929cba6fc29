/* Cuboid demagnetization-tensor kernel shared by the compiled drivers.
 *
 * B = N @ J for a uniformly magnetized axis-aligned cuboid with remanence J (T).
 * Keep in sync with _kernels_py.py.  The per-voxel loop is branch-free so GCC
 * can vectorize it against libmvec; no inf/NaN may be produced (the module is
 * built with -ffinite-math-only).
 */
#include <math.h>
#include <stdlib.h>
#ifdef _OPENMP
#include <omp.h>
#endif

#ifdef MAGLARMOR_SIMD_MATH
extern double atan2(double, double) __attribute__((simd("notinbranch")));
extern double log(double) __attribute__((simd("notinbranch")));
#endif

#define ML_INV4PI 0.07957747154594767

static inline double ml_arg_pair(double u, double v, double w0, double w1, double R0, double R1)
{
    double uv = u * v;
    double re0 = (w0 != 0.0) ? fabs(w0) * R0 : 1.0;
    double im0 = (w0 > 0.0) ? uv : ((w0 < 0.0) ? -uv : 0.0);
    double re1 = (w1 != 0.0) ? fabs(w1) * R1 : 1.0;
    double im1 = (w1 > 0.0) ? uv : ((w1 < 0.0) ? -uv : 0.0);
    return atan2(im1 * re0 - re1 * im0, re1 * re0 + im1 * im0);
}

static inline double ml_ratio(double t0, double t1, double rho2, double R0, double R1)
{
    double pos = (t1 + R1) / fmax(t0 + R0, 1e-300);
    double neg = (R0 - t0) / fmax(R1 - t1, 1e-300);
    double mix = (t1 + R1) * (R0 - t0) / fmax(rho2, 1e-300);
    return (t0 >= 0.0) ? pos : ((t1 <= 0.0) ? neg : mix);
}

/* Unique tensor entries of every voxel at one point. */
static void ml_tensor_row(double px, double py, double pz,
                          const double *cx, const double *cy, const double *cz,
                          const double *hx, const double *hy, const double *hz,
                          long V, double eps,
                          double *nxx, double *nyy, double *nzz,
                          double *nxy, double *nxz, double *nyz)
{
#pragma omp simd
    for (long v = 0; v < V; v++) {
        double dx = px - cx[v], dy = py - cy[v], dz = pz - cz[v];
        double ex = fabs(dx) - hx[v], ey = fabs(dy) - hy[v], ez = fabs(dz) - hz[v];
        int inside = (ex < 0.0) & (ey < 0.0) & (ez < 0.0);
        double emax = fmax(ex, fmax(ey, ez));
        double ox = fmax(ex, 0.0), oy = fmax(ey, 0.0), oz = fmax(ez, 0.0);
        double dist = inside ? -emax : sqrt(ox * ox + oy * oy + oz * oz);
        int near = dist < eps;
        int ax0 = near & (ex >= ey) & (ex >= ez);
        int ax1 = near & !ax0 & (ey >= ez);
        int ax2 = near & !ax0 & !ax1;
        dx = ax0 ? copysign(hx[v] + eps, dx >= 0.0 ? 1.0 : -1.0) : dx;
        dy = ax1 ? copysign(hy[v] + eps, dy >= 0.0 ? 1.0 : -1.0) : dy;
        dz = ax2 ? copysign(hz[v] + eps, dz >= 0.0 ? 1.0 : -1.0) : dz;
        inside = inside & !near;

        double a0 = -hx[v] - dx, a1 = hx[v] - dx;
        double b0 = -hy[v] - dy, b1 = hy[v] - dy;
        double c0 = -hz[v] - dz, c1 = hz[v] - dz;
        double aa0 = a0 * a0, aa1 = a1 * a1, bb0 = b0 * b0, bb1 = b1 * b1;
        double cc0 = c0 * c0, cc1 = c1 * c1;
        double R000 = sqrt(aa0 + bb0 + cc0), R001 = sqrt(aa0 + bb0 + cc1);
        double R010 = sqrt(aa0 + bb1 + cc0), R011 = sqrt(aa0 + bb1 + cc1);
        double R100 = sqrt(aa1 + bb0 + cc0), R101 = sqrt(aa1 + bb0 + cc1);
        double R110 = sqrt(aa1 + bb1 + cc0), R111 = sqrt(aa1 + bb1 + cc1);

        double szz = ml_arg_pair(a0, b0, c0, c1, R000, R001)
                   - ml_arg_pair(a0, b1, c0, c1, R010, R011)
                   - ml_arg_pair(a1, b0, c0, c1, R100, R101)
                   + ml_arg_pair(a1, b1, c0, c1, R110, R111);
        double sxx = ml_arg_pair(b0, c0, a0, a1, R000, R100)
                   - ml_arg_pair(b0, c1, a0, a1, R001, R101)
                   - ml_arg_pair(b1, c0, a0, a1, R010, R110)
                   + ml_arg_pair(b1, c1, a0, a1, R011, R111);
        double syy = ml_arg_pair(a0, c0, b0, b1, R000, R010)
                   - ml_arg_pair(a0, c1, b0, b1, R001, R011)
                   - ml_arg_pair(a1, c0, b0, b1, R100, R110)
                   + ml_arg_pair(a1, c1, b0, b1, R101, R111);

        double pxy = ml_ratio(c0, c1, aa0 + bb0, R000, R001) * ml_ratio(c0, c1, aa1 + bb1, R110, R111);
        double qxy = ml_ratio(c0, c1, aa0 + bb1, R010, R011) * ml_ratio(c0, c1, aa1 + bb0, R100, R101);
        double pxz = ml_ratio(b0, b1, aa0 + cc0, R000, R010) * ml_ratio(b0, b1, aa1 + cc1, R101, R111);
        double qxz = ml_ratio(b0, b1, aa0 + cc1, R001, R011) * ml_ratio(b0, b1, aa1 + cc0, R100, R110);
        double pyz = ml_ratio(a0, a1, bb0 + cc0, R000, R100) * ml_ratio(a0, a1, bb1 + cc1, R011, R111);
        double qyz = ml_ratio(a0, a1, bb0 + cc1, R001, R101) * ml_ratio(a0, a1, bb1 + cc0, R010, R110);

        double in = inside ? 1.0 : 0.0;
        nxx[v] = in - ML_INV4PI * sxx;
        nyy[v] = in - ML_INV4PI * syy;
        nzz[v] = in - ML_INV4PI * szz;
        nxy[v] = ML_INV4PI * log(pxy / qxy);
        nxz[v] = ML_INV4PI * log(pxz / qxz);
        nyz[v] = ML_INV4PI * log(pyz / qyz);
    }
}

typedef struct {
    double *nxx, *nyy, *nzz, *nxy, *nxz, *nyz;
} ml_scratch;

static int ml_scratch_alloc(ml_scratch *s, long V)
{
    double *buf = (double *)malloc(sizeof(double) * 6 * (size_t)(V > 0 ? V : 1));
    if (!buf) return -1;
    s->nxx = buf; s->nyy = buf + V; s->nzz = buf + 2 * V;
    s->nxy = buf + 3 * V; s->nxz = buf + 4 * V; s->nyz = buf + 5 * V;
    return 0;
}

static void ml_scratch_free(ml_scratch *s) { free(s->nxx); }

/* out[3p + i] = sum_v N(p, v) @ mag[v] */
static int ml_field_sum(long P, const double *pts, long V,
                        const double *cx, const double *cy, const double *cz,
                        const double *hx, const double *hy, const double *hz,
                        const double *mx, const double *my, const double *mz,
                        double eps, int nthreads, double *out)
{
    int failed = 0;
#pragma omp parallel num_threads(nthreads) reduction(|:failed)
    {
        ml_scratch s;
        if (ml_scratch_alloc(&s, V)) {
            failed = 1;
        } else {
#pragma omp for schedule(static)
            for (long p = 0; p < P; p++) {
                ml_tensor_row(pts[3 * p], pts[3 * p + 1], pts[3 * p + 2],
                              cx, cy, cz, hx, hy, hz, V, eps,
                              s.nxx, s.nyy, s.nzz, s.nxy, s.nxz, s.nyz);
                double bx = 0.0, by = 0.0, bz = 0.0;
                for (long v = 0; v < V; v++) {
                    bx += s.nxx[v] * mx[v] + s.nxy[v] * my[v] + s.nxz[v] * mz[v];
                    by += s.nxy[v] * mx[v] + s.nyy[v] * my[v] + s.nyz[v] * mz[v];
                    bz += s.nxz[v] * mx[v] + s.nyz[v] * my[v] + s.nzz[v] * mz[v];
                }
                out[3 * p] = bx;
                out[3 * p + 1] = by;
                out[3 * p + 2] = bz;
            }
            ml_scratch_free(&s);
        }
    }
    return failed ? -1 : 0;
}

/* out[((p * G + g) * 3 + i) * 3 + j] += N_ij(p, v) * colsign[3v + j], g = group[v] */
static int ml_tensor_groups(long P, const double *pts, long V,
                            const double *cx, const double *cy, const double *cz,
                            const double *hx, const double *hy, const double *hz,
                            const double *colsign, const long *group, long G,
                            double eps, int nthreads, double *out)
{
    int failed = 0;
#pragma omp parallel num_threads(nthreads) reduction(|:failed)
    {
        ml_scratch s;
        if (ml_scratch_alloc(&s, V)) {
            failed = 1;
        } else {
#pragma omp for schedule(static)
            for (long p = 0; p < P; p++) {
                ml_tensor_row(pts[3 * p], pts[3 * p + 1], pts[3 * p + 2],
                              cx, cy, cz, hx, hy, hz, V, eps,
                              s.nxx, s.nyy, s.nzz, s.nxy, s.nxz, s.nyz);
                double *o = out + (size_t)p * G * 9;
                for (long v = 0; v < V; v++) {
                    double *t = o + group[v] * 9;
                    const double *sg = colsign + 3 * v;
                    t[0] += s.nxx[v] * sg[0]; t[1] += s.nxy[v] * sg[1]; t[2] += s.nxz[v] * sg[2];
                    t[3] += s.nxy[v] * sg[0]; t[4] += s.nyy[v] * sg[1]; t[5] += s.nyz[v] * sg[2];
                    t[6] += s.nxz[v] * sg[0]; t[7] += s.nyz[v] * sg[1]; t[8] += s.nzz[v] * sg[2];
                }
            }
            ml_scratch_free(&s);
        }
    }
    return failed ? -1 : 0;
}
