#pragma once

namespace calikit {

// Standard normal density.
double normal_pdf(double z);
// Standard normal cdf, via std::erfc.
double normal_cdf(double z);
// Upper tail 1 - cdf(z), accurate for large z.
double normal_sf(double z);
// Standard normal quantile for p in (0, 1): Acklam's rational initializer
// followed by a Halley step. Throws std::domain_error outside (0, 1).
double normal_icdf(double p);

}  // namespace calikit
